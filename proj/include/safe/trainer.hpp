#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "safe/dataset.hpp"
#include "safe/fusion.hpp"

namespace safe {

struct OptimConfig {
  double base_lr = 3e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 200;
  std::size_t batch_size = 8;
  // Cosine floor as a fraction of base_lr.
  double schedule_floor_fraction = 0.1;
  std::size_t warmup_steps = 0;
  double grad_clip_norm = 0.0;  // 0 disables clipping
  std::size_t eval_every = 1;
  std::uint64_t seed = 0;

  /// The recipe used with pretrained encoders at full scale.
  static OptimConfig full_scale() {
    OptimConfig c;
    c.base_lr = 8e-6;
    c.batch_size = 16;
    c.epochs = 50;
    return c;
  }

  void validate() const {
    if (!(base_lr >= 0.0)) throw ConfigError("optim.base_lr must be non-negative");
    if (!(schedule_floor_fraction >= 0.0 && schedule_floor_fraction < 1.0))
      throw ConfigError("optim.schedule_floor_fraction must lie in [0, 1)");
    if (batch_size < 1) throw ConfigError("optim.batch_size must be at least 1");
    if (epochs < 1) throw ConfigError("optim.epochs must be at least 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optim.betas must lie in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("optim.weight_decay must be non-negative");
  }
};

struct TrainState {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;
  double current_lr = 0.0;
  std::mt19937_64 rng;
};

// cross_entropy itself lives with the other differentiable ops.

/// lr = floor + (base - floor) * (1 + cos(pi * step / total)) / 2.
inline double cosine_lr(std::size_t step, std::size_t total_steps, const OptimConfig& cfg) {
  if (total_steps == 0) throw ContractError("cosine_lr: total_steps must be positive");
  if (step > total_steps) throw ContractError("cosine_lr: step beyond total_steps");
  const double floor = cfg.base_lr * cfg.schedule_floor_fraction;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return floor + (cfg.base_lr - floor) * (1.0 + std::cos(std::numbers::pi * frac)) / 2.0;
}

/// Cosine schedule behind an optional linear warmup.
inline double scheduled_lr(std::size_t step, std::size_t total_steps, const OptimConfig& cfg) {
  if (step < cfg.warmup_steps)
    return cfg.base_lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  return cosine_lr(step, total_steps, cfg);
}

/// One decoupled-weight-decay Adam update at state.current_lr. Parameters
/// without a gradient, or in a frozen group, are left untouched.
inline void adamw_step(ParamStore& params, const GradMap& grads, TrainState& state, const OptimConfig& cfg,
                       const std::set<std::string>& frozen = {}) {
  ++state.step;
  const double lr = state.current_lr;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    if (frozen.contains(param_group(name))) continue;
    Tensor& w = params.at(name);
    if (g.shape() != w.shape())
      throw ContractError("adamw_step: gradient " + shape_str(g.shape()) + " does not match parameter '" + name + "' " +
                          shape_str(w.shape()));
    auto [mit, m_new] = state.first_moment.try_emplace(name, w.shape());
    auto [vit, v_new] = state.second_moment.try_emplace(name, w.shape());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] = w[i] - lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps)) - lr * cfg.weight_decay * w[i];
    }
  }
}

/// Class indices ordered by descending score, ties by lower index.
inline std::vector<std::size_t> rank_classes(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

inline bool in_top_k(std::span<const double> scores, std::size_t target, std::size_t k) {
  const auto r = rank_classes(scores);
  return std::find(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(std::min(k, r.size())), target) !=
         r.begin() + static_cast<std::ptrdiff_t>(std::min(k, r.size()));
}

inline std::vector<double> softmax(std::span<const double> x) {
  const double mx = *std::max_element(x.begin(), x.end());
  std::vector<double> out(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (out[i] = std::exp(x[i] - mx));
  for (auto& v : out) v /= s;
  return out;
}

struct SamplePrediction {
  std::string id;
  std::size_t label = 0;
  std::vector<double> logits;
  std::vector<double> probs;
};

struct EvalMetrics {
  double top1 = 0.0;
  double top5 = 0.0;
  std::vector<double> per_class;                   // NaN for classes absent from the split
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<SamplePrediction> samples;
};

/// Top-1 / top-5 / per-class accuracy and confusion counts from logits.
inline EvalMetrics compute_metrics(std::vector<SamplePrediction> preds, std::size_t classes) {
  if (preds.empty()) throw ContractError("evaluate: empty dataset");
  EvalMetrics m;
  m.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::vector<std::size_t> hits(classes, 0), totals(classes, 0);
  std::size_t top1 = 0, top5 = 0;
  for (auto& p : preds) {
    if (p.label >= classes || p.logits.size() != classes) throw ContractError("evaluate: label/logit size mismatch");
    const auto ranked = rank_classes(p.logits);
    ++m.confusion[p.label][ranked[0]];
    ++totals[p.label];
    if (ranked[0] == p.label) {
      ++top1;
      ++hits[p.label];
    }
    if (in_top_k(p.logits, p.label, 5)) ++top5;
    p.probs = softmax(p.logits);
  }
  const auto n = static_cast<double>(preds.size());
  m.top1 = static_cast<double>(top1) / n;
  m.top5 = static_cast<double>(top5) / n;
  for (std::size_t c = 0; c < classes; ++c)
    m.per_class.push_back(totals[c] ? static_cast<double>(hits[c]) / static_cast<double>(totals[c])
                                    : std::numeric_limits<double>::quiet_NaN());
  m.samples = std::move(preds);
  return m;
}

// ---- forward helpers -------------------------------------------------------

/// Encoder outputs for one sample, valid while encoder parameters are fixed.
struct CachedEncoding {
  Tensor vision;
  Tensor event;
};

inline bool encoders_fixed(const SafeModel& model, const AblationSwitches& sw) {
  const auto frozen = frozen_groups(model.cfg, sw);
  return frozen.contains("rgb_encoder") && frozen.contains("event_encoder");
}

inline CachedEncoding cache_encoding(const SafeModel& model, const Sample& s, const AblationSwitches& sw) {
  Graph g;
  ParamBinder p(g, model.params, [](const std::string&) { return false; });
  auto enc = encode_inputs(p, model, s.clip, s.event_frames, sw);
  return {enc.vision.tokens.value(), enc.event.tokens.value()};
}

inline ClassifierOutput forward_sample(ParamBinder& p, const SafeModel& model, const Sample& s,
                                       const AblationSwitches& sw, const CachedEncoding* cache = nullptr) {
  if (!cache) return safe_forward(p, model, s.clip, s.event_frames, sw);
  Graph& g = p.graph();
  EncodedInputs enc{{g.constant(cache->vision), Modality::Vision}, {g.constant(cache->event), Modality::Event}};
  return fuse_and_classify(p, model, enc, sw);
}

inline std::vector<CachedEncoding> cache_encodings(const SafeModel& model, const Dataset& ds, const AblationSwitches& sw) {
  std::vector<CachedEncoding> out;
  out.reserve(ds.size());
  for (const auto& s : ds) out.push_back(cache_encoding(model, s, sw));
  return out;
}

inline std::vector<double> predict_logits(const SafeModel& model, const Sample& s, const AblationSwitches& sw,
                                          const CachedEncoding* cache = nullptr) {
  Graph g;
  ParamBinder p(g, model.params, [](const std::string&) { return false; });
  auto out = forward_sample(p, model, s, sw, cache);
  const auto d = out.logits.value().data();
  return {d.begin(), d.end()};
}

inline EvalMetrics evaluate(const Dataset& ds, const SafeModel& model, const AblationSwitches& sw,
                            const std::vector<CachedEncoding>* cache = nullptr) {
  if (ds.empty()) throw ContractError("evaluate: empty dataset");
  std::vector<SamplePrediction> preds;
  preds.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i)
    preds.push_back({ds[i].id, ds[i].label, predict_logits(model, ds[i], sw, cache ? &(*cache)[i] : nullptr), {}});
  return compute_metrics(std::move(preds), model.classes());
}

/// Pooled pre-classifier feature per sample.
inline std::vector<std::vector<double>> pooled_features(const Dataset& ds, const SafeModel& model,
                                                        const AblationSwitches& sw) {
  std::vector<std::vector<double>> out;
  for (const auto& s : ds) {
    Graph g;
    ParamBinder p(g, model.params, [](const std::string&) { return false; });
    const auto d = forward_sample(p, model, s, sw).pooled.value().data();
    out.emplace_back(d.begin(), d.end());
  }
  return out;
}

// ---- training loop -----------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double train_top1 = 0.0;
  std::optional<double> eval_top1;
  std::optional<double> eval_top5;
  double wall_ms = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"epoch", epoch}, {"lr", lr}, {"train_loss", train_loss}, {"train_top1", train_top1}};
    j["eval_top1"] = eval_top1 ? nlohmann::json(*eval_top1) : nlohmann::json(nullptr);
    j["eval_top5"] = eval_top5 ? nlohmann::json(*eval_top5) : nlohmann::json(nullptr);
    j["wall_ms"] = wall_ms;
    return j;
  }
};

struct TrainOptions {
  const Dataset* eval = nullptr;
  // Return false to stop after this epoch.
  std::function<bool(const EpochRecord&)> on_epoch;
  bool cache_fixed_encoders = true;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  TrainState state;
};

/// Mini-batch AdamW on mean cross-entropy with a seeded per-epoch shuffle.
/// Updates model.params in place.
inline TrainResult train(const Dataset& ds, SafeModel& model, const OptimConfig& cfg, const AblationSwitches& sw,
                         const TrainOptions& opts = {}) {
  if (ds.empty()) throw ContractError("train: empty dataset");
  cfg.validate();
  for (const auto& s : ds)
    if (s.label >= model.classes()) throw ContractError("train: sample '" + s.id + "' has an out-of-range label");

  const auto frozen = frozen_groups(model.cfg, sw);
  const bool use_cache = opts.cache_fixed_encoders && encoders_fixed(model, sw);
  std::vector<CachedEncoding> cache, eval_cache;
  if (use_cache) {
    cache = cache_encodings(model, ds, sw);
    if (opts.eval) eval_cache = cache_encodings(model, *opts.eval, sw);
  }
  auto requires_grad = [&frozen](const std::string& name) { return !frozen.contains(param_group(name)); };

  TrainResult result;
  TrainState& st = result.state;
  st.rng.seed(cfg.seed);
  const std::size_t steps_per_epoch = (ds.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    st.epoch = epoch;
    std::shuffle(order.begin(), order.end(), st.rng);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b0 = 0; b0 < ds.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(ds.size(), b0 + cfg.batch_size);
      GradMap batch;
      for (std::size_t bi = b0; bi < b1; ++bi) {
        const std::size_t idx = order[bi];
        Graph g;
        ParamBinder p(g, model.params, requires_grad);
        auto out = forward_sample(p, model, ds[idx], sw, use_cache ? &cache[idx] : nullptr);
        Var loss = cross_entropy(out.logits, ds[idx].label);
        g.backward(loss);
        loss_sum += loss.value()[0];
        if (rank_classes(out.logits.value().data())[0] == ds[idx].label) ++correct;
        for (auto& [name, gt] : p.gradients()) {
          auto [it, inserted] = batch.try_emplace(name, gt);
          if (!inserted)
            for (std::size_t i = 0; i < gt.size(); ++i) it->second[i] += gt[i];
        }
      }
      const double inv = 1.0 / static_cast<double>(b1 - b0);
      double sq = 0.0;
      for (auto& [name, gt] : batch)
        for (auto& v : gt.data()) {
          v *= inv;
          sq += v * v;
        }
      if (cfg.grad_clip_norm > 0.0 && std::sqrt(sq) > cfg.grad_clip_norm) {
        const double s = cfg.grad_clip_norm / std::sqrt(sq);
        for (auto& [name, gt] : batch)
          for (auto& v : gt.data()) v *= s;
      }
      st.current_lr = scheduled_lr(st.step, total_steps, cfg);
      if (b0 == 0) rec.lr = st.current_lr;
      adamw_step(model.params, batch, st, cfg, frozen);
    }
    rec.train_loss = loss_sum / static_cast<double>(ds.size());
    rec.train_top1 = static_cast<double>(correct) / static_cast<double>(ds.size());
    if (opts.eval && !opts.eval->empty() && cfg.eval_every > 0 &&
        ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs)) {
      const auto m = evaluate(*opts.eval, model, sw, use_cache ? &eval_cache : nullptr);
      rec.eval_top1 = m.top1;
      rec.eval_top5 = m.top5;
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(rec);
    if (opts.on_epoch && !opts.on_epoch(rec)) break;
  }
  return result;
}

}  // namespace safe
