#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "safe/config.hpp"
#include "safe/verify.hpp"

// Implementations of the CLI subcommands. Each returns a process exit code.

namespace safe {

inline constexpr int kExitOk = 0;
inline constexpr int kExitVerification = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;

struct CommandOptions {
  std::filesystem::path out;  // defaults to cfg.out_dir
  std::filesystem::path checkpoint;
  std::string split = "eval";
  bool inject_fault = false;
  std::ostream* log = &std::cout;
};

inline std::filesystem::path out_dir(const RunConfig& cfg, const CommandOptions& opt) {
  return opt.out.empty() ? std::filesystem::path(cfg.out_dir) : opt.out;
}

inline std::filesystem::path checkpoint_path(const RunConfig& cfg, const CommandOptions& opt) {
  return opt.checkpoint.empty() ? out_dir(cfg, opt) / "checkpoint.bin" : opt.checkpoint;
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << j.dump(2) << '\n';
  if (!os) throw IoError("short write on '" + path.string() + "'");
}

struct LoadedData {
  DatasetSplit split;
  std::vector<std::string> labels;
};

/// The dataset on disk named by data.dir, else a freshly synthesized split.
inline LoadedData load_data(const RunConfig& cfg) {
  LoadedData d;
  if (!cfg.data.dir.empty()) {
    d.split = read_dataset(cfg.data.dir, &d.labels);
    if (!cfg.labels_file_labels.empty()) {
      if (cfg.labels_file_labels.size() != d.labels.size())
        throw ConfigError("labels file does not match the dataset's class count");
      d.labels = cfg.labels_file_labels;
    }
    return d;
  }
  d.split = synth_split(cfg.data.spec(), cfg.data.train_per_class, cfg.data.eval_per_class, cfg.seed);
  d.labels = cfg.labels();
  return d;
}

inline const Dataset& pick_split(const LoadedData& d, const std::string& split) {
  if (split == "train") return d.split.train;
  if (split == "eval") return d.split.eval;
  throw ConfigError("--split must be 'train' or 'eval', got '" + split + "'");
}

struct RunOutcome {
  SafeModel model;
  TrainResult train;
  std::optional<EvalMetrics> eval;
};

/// Train on the train split, evaluate on the eval split (when non-empty).
inline RunOutcome train_and_evaluate(const RunConfig& cfg, const LoadedData& data, const AblationSwitches& sw,
                                     std::uint64_t seed, std::ostream* log = nullptr) {
  RunOutcome r{make_model(cfg.model, data.labels, seed), {}, {}};
  OptimConfig oc = cfg.optim;
  oc.seed = seed;
  TrainOptions to;
  if (!data.split.eval.empty()) to.eval = &data.split.eval;
  if (log)
    to.on_epoch = [log](const EpochRecord& rec) {
      *log << rec.to_json().dump() << std::endl;
      return true;
    };
  r.train = train(data.split.train, r.model, oc, sw, to);
  if (!data.split.eval.empty()) r.eval = evaluate(data.split.eval, r.model, sw);
  return r;
}

inline nlohmann::json switches_json(const AblationSwitches& s) {
  return {{"sci", s.sci}, {"lvm", s.lvm}, {"mt", s.mt}, {"sa", s.sa}, {"ca", s.ca}};
}

inline nlohmann::json metrics_json(const EvalMetrics& m, const std::vector<std::string>& labels, const std::string& split) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : m.samples) {
    const auto ranked = rank_classes(s.logits);
    nlohmann::json top = nlohmann::json::array();
    for (std::size_t k = 0; k < std::min<std::size_t>(5, ranked.size()); ++k)
      top.push_back({{"class", ranked[k]}, {"label", labels.at(ranked[k])}, {"score", s.probs[ranked[k]]}});
    samples.push_back({{"id", s.id}, {"label", s.label}, {"top5", top}, {"probs", s.probs}});
  }
  nlohmann::json per_class = nlohmann::json::array();
  for (double v : m.per_class) per_class.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
  return {{"split", split},     {"top1", m.top1},         {"top5", m.top5},    {"per_class", per_class},
          {"labels", labels},   {"confusion", m.confusion}, {"samples", samples}};
}

inline void write_metrics_log(const std::filesystem::path& path, const std::vector<EpochRecord>& log) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  for (const auto& r : log) os << r.to_json().dump() << '\n';
}

// ---- commands -------------------------------------------------------------------

inline int cmd_synth_data(const RunConfig& cfg, const CommandOptions& opt) {
  const auto dir = out_dir(cfg, opt);
  const auto split = synth_split(cfg.data.spec(), cfg.data.train_per_class, cfg.data.eval_per_class, cfg.seed);
  write_dataset(split, cfg.labels(), cfg.data.spec(), cfg.data.event_format, dir);
  *opt.log << "wrote " << split.train.size() + split.eval.size() << " samples to " << dir.string() << '\n';
  return kExitOk;
}

inline int cmd_train(const RunConfig& cfg, const CommandOptions& opt) {
  const auto data = load_data(cfg);
  auto r = train_and_evaluate(cfg, data, cfg.switches, cfg.seed, opt.log);
  const auto dir = out_dir(cfg, opt);
  ensure_dir(dir);
  if (checkpoint_path(cfg, opt).has_parent_path()) ensure_dir(checkpoint_path(cfg, opt).parent_path());
  write_metrics_log(dir / "metrics.jsonl", r.train.log);
  save_checkpoint(r.model.params, checkpoint_path(cfg, opt));
  write_json(dir / "config.json", to_json(cfg));
  if (r.eval) {
    write_json(dir / "eval_eval.json", metrics_json(*r.eval, data.labels, "eval"));
    *opt.log << "eval top1 " << r.eval->top1 << " top5 " << r.eval->top5 << '\n';
  }
  return kExitOk;
}

inline SafeModel load_model(const RunConfig& cfg, const CommandOptions& opt, const std::vector<std::string>& labels) {
  const auto path = checkpoint_path(cfg, opt);
  if (!std::filesystem::exists(path)) throw IoError("checkpoint '" + path.string() + "' not found");
  auto model = make_model(cfg.model, labels, cfg.seed);
  load_checkpoint(model.params, path);
  return model;
}

inline int cmd_eval(const RunConfig& cfg, const CommandOptions& opt) {
  const auto data = load_data(cfg);
  const Dataset& ds = pick_split(data, opt.split);
  if (ds.empty()) throw ConfigError("the " + opt.split + " split is empty");
  const auto model = load_model(cfg, opt, data.labels);
  const auto m = evaluate(ds, model, cfg.switches);
  const auto dir = out_dir(cfg, opt);
  ensure_dir(dir);
  write_json(dir / ("eval_" + opt.split + ".json"), metrics_json(m, data.labels, opt.split));
  *opt.log << opt.split << " top1 " << m.top1 << " top5 " << m.top5 << '\n';
  return kExitOk;
}

inline const std::vector<std::string>& ablation_row_names() {
  static const std::vector<std::string> names{"full", "no_sci", "no_lvm", "no_mt", "no_sa", "no_ca"};
  return names;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Sample standard deviation; 0 for a single value.
inline double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// Six switch patterns x R seeds on one dataset; seed r uses cfg.seed + r
/// for initialization and shuffling.
inline nlohmann::json run_ablation(const RunConfig& cfg, const LoadedData& data, std::ostream& log) {
  if (data.split.eval.empty()) throw ConfigError("ablate needs a non-empty eval split (data.eval_per_class)");
  const auto patterns = ablation_patterns();
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < patterns.size(); ++i) {
    std::vector<double> top1, top5;
    nlohmann::json runs = nlohmann::json::array();
    for (std::size_t r = 0; r < cfg.ablate_seeds; ++r) {
      const auto out = train_and_evaluate(cfg, data, patterns[i], cfg.seed + r);
      top1.push_back(out.eval->top1);
      top5.push_back(out.eval->top5);
      runs.push_back({{"seed", cfg.seed + r}, {"top1", out.eval->top1}, {"top5", out.eval->top5}});
      log << ablation_row_names()[i] << " seed " << cfg.seed + r << " top1 " << out.eval->top1 << '\n';
    }
    rows.push_back({{"row", i + 1},
                    {"name", ablation_row_names()[i]},
                    {"switches", switches_json(patterns[i])},
                    {"runs", runs},
                    {"top1_mean", mean_of(top1)},
                    {"top1_sd", sd_of(top1)},
                    {"top5_mean", mean_of(top5)},
                    {"top5_sd", sd_of(top5)}});
  }
  return {{"seeds", cfg.ablate_seeds}, {"rows", rows}};
}

inline int cmd_ablate(const RunConfig& cfg, const CommandOptions& opt) {
  const auto data = load_data(cfg);
  if (data.split.eval.empty()) throw ConfigError("ablate needs a non-empty eval split (data.eval_per_class)");
  const auto table = run_ablation(cfg, data, *opt.log);
  const auto dir = out_dir(cfg, opt);
  ensure_dir(dir);
  write_json(dir / "ablation.json", table);
  return kExitOk;
}

/// Measured token counts of one forward pass (per branch, before fusion).
inline std::pair<std::size_t, std::size_t> branch_tokens(const SafeModel& model, const Sample& s,
                                                         const AblationSwitches& sw) {
  Graph g;
  ParamBinder p(g, model.params, [](const std::string&) { return false; });
  const auto enc = encode_inputs(p, model, s.clip, s.event_frames, sw);
  return {enc.vision.size(), enc.event.size()};
}

inline nlohmann::json run_frame_sweep(const RunConfig& cfg, std::ostream& log) {
  nlohmann::json rows = nlohmann::json::array();
  for (auto n : cfg.sweep.frame_counts) {
    RunConfig c = cfg;
    c.data.frames = n;
    const auto data = load_data(c);
    const auto out = train_and_evaluate(c, data, c.switches, c.seed);
    const auto [vt, et] = branch_tokens(out.model, data.split.eval.at(0), c.switches);
    rows.push_back({{"frames", n},
                    {"tokens_per_frame", c.model.rgb.tokens_per_frame()},
                    {"vision_tokens", vt},
                    {"event_tokens", et},
                    {"top1", out.eval->top1},
                    {"top5", out.eval->top5}});
    log << "frames " << n << " tokens " << vt << "+" << et << " top1 " << out.eval->top1 << '\n';
  }
  return {{"rows", rows}};
}

inline int cmd_sweep_frames(const RunConfig& cfg, const CommandOptions& opt) {
  if (!cfg.data.dir.empty()) throw ConfigError("sweep-frames synthesizes its data; unset data.dir");
  if (cfg.data.eval_per_class == 0) throw ConfigError("sweep-frames needs data.eval_per_class > 0");
  const auto dir = out_dir(cfg, opt);
  const auto table = run_frame_sweep(cfg, *opt.log);
  ensure_dir(dir);
  write_json(dir / "sweep_frames.json", table);
  return kExitOk;
}

inline nlohmann::json run_prompt_sweep(const RunConfig& cfg, std::ostream& log) {
  const auto data = load_data(cfg);
  if (data.split.eval.empty()) throw ConfigError("sweep-prompts needs a non-empty eval split");
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& t : cfg.sweep.templates) {
    RunConfig c = cfg;
    c.model.text.prompt = t;
    const auto out = train_and_evaluate(c, data, c.switches, c.seed);
    rows.push_back({{"template", t},
                    {"example", render_prompt(PromptTemplate(t), data.labels.at(0))},
                    {"top1", out.eval->top1},
                    {"top5", out.eval->top5}});
    log << "prompt '" << t << "' top1 " << out.eval->top1 << '\n';
  }
  return {{"rows", rows}};
}

inline int cmd_sweep_prompts(const RunConfig& cfg, const CommandOptions& opt) {
  if (cfg.data.dir.empty() && cfg.data.eval_per_class == 0)
    throw ConfigError("sweep-prompts needs data.eval_per_class > 0");
  const auto dir = out_dir(cfg, opt);
  const auto table = run_prompt_sweep(cfg, *opt.log);
  ensure_dir(dir);
  write_json(dir / "sweep_prompts.json", table);
  return kExitOk;
}

struct GradCheckResult {
  bool pass = false;
  nlohmann::json report;
};

/// Primitive suite, then the full model on one sample (semantic tokens on),
/// then the free-token path (semantic tokens off).
inline GradCheckResult run_grad_check(const RunConfig& cfg, bool inject_fault, std::ostream& log) {
  Graph::Options go;
  go.inject_fault = inject_fault;
  const auto& gc = cfg.grad_check;
  GradCheckResult res;
  res.pass = true;

  nlohmann::json prims = nlohmann::json::array();
  for (const auto& p : primitive_grad_suite(gc.primitive_eps, gc.primitive_tol, cfg.seed, go)) {
    prims.push_back({{"op", p.op}, {"max_rel_error", p.max_rel_error}, {"coords", p.coords}, {"pass", p.pass}});
    log << (p.pass ? "PASS " : "FAIL ") << "primitive " << p.op << " max_rel_error " << p.max_rel_error << '\n';
    res.pass = res.pass && p.pass;
  }

  SynthSpec spec = cfg.data.spec();
  spec.samples_per_class = 1;
  const auto raw = synth_dataset(spec, cfg.seed);
  const Sample sample = make_sample("gradcheck", raw[0].label, raw[0].clip, raw[0].events);
  auto model = make_model(cfg.model, cfg.labels(), cfg.seed);

  nlohmann::json e2e = nlohmann::json::array();
  auto run = [&](const char* name, AblationSwitches sw, std::vector<std::string> groups) {
    const auto m = model_grad_check(model, sample, sw, gc.model_eps, gc.model_tol, gc.min_coords, cfg.seed, groups, go);
    nlohmann::json by_group = nlohmann::json::object();
    for (const auto& [g, e] : m.by_group) {
      by_group[g] = e;
      log << (e < gc.model_tol ? "PASS " : "FAIL ") << name << " group " << g << " max_rel_error " << e << '\n';
    }
    nlohmann::json failing = nlohmann::json::array();
    for (const auto& c : m.report.checks)
      if (c.rel_error >= gc.model_tol) failing.push_back(c.name);
    e2e.push_back({{"run", name},
                   {"coords", m.report.checks.size()},
                   {"max_rel_error", m.report.max_rel_error},
                   {"by_group", by_group},
                   {"failing_params", failing},
                   {"pass", m.pass}});
    res.pass = res.pass && m.pass;
  };
  std::vector<std::string> groups;
  for (const auto& g : param_groups())
    if (g != "free_text") groups.push_back(g);
  run("model", AblationSwitches{}, groups);
  AblationSwitches no_sci;
  no_sci.sci = false;
  run("model_free_text", no_sci, {"free_text", "classifier"});

  res.report = {{"pass", res.pass}, {"inject_fault", inject_fault}, {"primitive", prims}, {"model", e2e}};
  log << (res.pass ? "grad-check PASS" : "grad-check FAIL") << '\n';
  return res;
}

inline int cmd_grad_check(const RunConfig& cfg, const CommandOptions& opt) {
  const auto res = run_grad_check(cfg, opt.inject_fault, *opt.log);
  const auto dir = out_dir(cfg, opt);
  ensure_dir(dir);
  write_json(dir / "grad_check.json", res.report);
  return res.pass ? kExitOk : kExitVerification;
}

inline void write_embeddings_csv(const std::filesystem::path& path, const Dataset& ds,
                                 const std::vector<std::vector<double>>& feats) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << "sample_id,label";
  for (std::size_t j = 0; j < (feats.empty() ? 0 : feats[0].size()); ++j) os << ",f" << j;
  os << '\n';
  char buf[40];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << ds[i].id << ',' << ds[i].label;
    for (double v : feats[i]) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      os << ',' << buf;
    }
    os << '\n';
  }
}

inline int cmd_dump_embeddings(const RunConfig& cfg, const CommandOptions& opt) {
  const auto data = load_data(cfg);
  const Dataset& ds = pick_split(data, opt.split);
  if (ds.empty()) throw ConfigError("the " + opt.split + " split is empty");
  const auto model = load_model(cfg, opt, data.labels);
  const auto feats = pooled_features(ds, model, cfg.switches);
  const auto dir = out_dir(cfg, opt);
  ensure_dir(dir);
  const auto path = dir / ("embeddings_" + opt.split + ".csv");
  write_embeddings_csv(path, ds, feats);
  *opt.log << "wrote " << ds.size() << " rows to " << path.string() << '\n';
  return kExitOk;
}

}  // namespace safe
