#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "safe/text.hpp"

namespace safe {

/// Component switches of the ablation study; all on is the full model.
struct AblationSwitches {
  bool sci = true;  // semantic (prompt-encoded) class tokens
  bool lvm = true;  // deep frozen encoders instead of shallow trainable ones
  bool mt = true;   // vision-text / event-text multimodal transformers
  bool sa = true;   // vision-event self-attention fusion
  bool ca = true;   // text-query cross-attention

  std::string to_string() const {
    auto b = [](bool v) { return v ? "1" : "0"; };
    return std::string("sci=") + b(sci) + " lvm=" + b(lvm) + " mt=" + b(mt) + " sa=" + b(sa) + " ca=" + b(ca);
  }
  friend bool operator==(const AblationSwitches&, const AblationSwitches&) = default;
};

/// The six component-analysis rows: everything on, then each switch off alone.
inline std::vector<AblationSwitches> ablation_patterns() {
  std::vector<AblationSwitches> rows(6);
  rows[1].sci = false;
  rows[2].lvm = false;
  rows[3].mt = false;
  rows[4].sa = false;
  rows[5].ca = false;
  return rows;
}

struct FusionConfig {
  std::size_t dim = 64;
  // Blocks in each multimodal transformer and in the final fusion stage.
  std::size_t depth = 1;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
};

struct ModelConfig {
  EncoderConfig rgb;
  EncoderConfig event;
  TextConfig text;
  FusionConfig fusion;
  Activation activation = Activation::Gelu;

  std::size_t dim() const { return fusion.dim; }

  void validate() const {
    rgb.validate("rgb_encoder");
    event.validate("event_encoder");
    if (rgb.dim != fusion.dim || event.dim != fusion.dim)
      throw ConfigError("encoder dims (rgb " + std::to_string(rgb.dim) + ", event " + std::to_string(event.dim) +
                        ") must equal fusion.dim " + std::to_string(fusion.dim));
    if (fusion.heads == 0 || fusion.dim % fusion.heads != 0)
      throw ConfigError("fusion.heads must divide fusion.dim");
    if (fusion.mlp_ratio == 0) throw ConfigError("fusion.mlp_ratio must be positive");
    text.validate(fusion.dim);
  }
};

inline const std::vector<std::string>& param_groups() {
  static const std::vector<std::string> groups{"rgb_encoder", "event_encoder", "text",  "free_text",
                                               "mt_vt",       "mt_et",         "sa_ve", "ca_vt",
                                               "ca_et",       "final",         "classifier"};
  return groups;
}

/// Parameter groups the optimizer must leave untouched.
inline std::set<std::string> frozen_groups(const ModelConfig& cfg, const AblationSwitches& sw) {
  std::set<std::string> out;
  if (sw.lvm && cfg.rgb.frozen) out.insert("rgb_encoder");
  if (sw.lvm && cfg.event.frozen) out.insert("event_encoder");
  if (!cfg.text.trainable) out.insert("text");
  return out;
}

/// Everything needed to run the network: config, class labels, prompt,
/// vocabulary, parameters.
struct SafeModel {
  ModelConfig cfg;
  std::vector<std::string> labels;
  PromptTemplate prompt;
  Vocabulary vocab;
  ParamStore params;

  std::size_t classes() const { return labels.size(); }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Seeded initialization; each group draws from its own stream so that,
/// e.g., vocabulary size does not shift the fusion weights.
inline SafeModel make_model(const ModelConfig& cfg, std::vector<std::string> labels, std::uint64_t seed) {
  cfg.validate();
  if (labels.size() < 2) throw ConfigError("need at least 2 class labels");
  SafeModel m;
  m.cfg = cfg;
  m.labels = std::move(labels);
  m.prompt = PromptTemplate(cfg.text.prompt);
  const auto prompts = render_all(m.prompt, m.labels);
  m.vocab = Vocabulary::build(prompts);

  const std::size_t d = cfg.dim(), L = m.labels.size();
  auto init_for = [&](std::size_t group) { return ParamInit(detail::splitmix64(seed * 131 + group)); };
  {
    auto init = init_for(0);
    add_encoder_params(m.params, init, "rgb_encoder", cfg.rgb);
  }
  {
    auto init = init_for(1);
    add_encoder_params(m.params, init, "event_encoder", cfg.event);
  }
  {
    auto init = init_for(2);
    add_text_params(m.params, init, m.vocab.size(), d, cfg.text);
  }
  {
    auto init = init_for(3);
    m.params.add("free_text.tokens", init.normal({L, d}));
  }
  const std::size_t hidden = d * cfg.fusion.mlp_ratio;
  {
    auto init = init_for(4);
    for (std::size_t b = 0; b < cfg.fusion.depth; ++b)
      add_block_params(m.params, init, "mt_vt.block" + std::to_string(b), d, hidden);
  }
  {
    auto init = init_for(5);
    for (std::size_t b = 0; b < cfg.fusion.depth; ++b)
      add_block_params(m.params, init, "mt_et.block" + std::to_string(b), d, hidden);
  }
  {
    auto init = init_for(6);
    add_block_params(m.params, init, "sa_ve.block0", d, hidden);
  }
  for (std::size_t i = 0; i < 2; ++i) {
    auto init = init_for(7 + i);
    const std::string prefix = i == 0 ? "ca_vt" : "ca_et";
    for (const char* p : {"q", "k", "v"}) add_linear_params(m.params, init, prefix + "." + p, d, d);
  }
  {
    auto init = init_for(9);
    for (std::size_t b = 0; b < cfg.fusion.depth; ++b)
      add_block_params(m.params, init, "final.block" + std::to_string(b), d, hidden);
  }
  {
    auto init = init_for(10);
    add_linear_params(m.params, init, "classifier", d, L);
  }
  return m;
}

/// Joint self-attention over [modality; text], split back at the boundary.
inline std::pair<TokenSequence, TokenSequence> multimodal_transformer(ParamBinder& p, const TokenSequence& modality,
                                                                      const TokenSequence& text, const std::string& prefix,
                                                                      std::size_t depth, std::size_t heads,
                                                                      Activation act) {
  if (modality.dim() != text.dim())
    throw ContractError(prefix + ": width mismatch " + std::to_string(modality.dim()) + " vs " + std::to_string(text.dim()));
  if (depth == 0) return {modality, text};
  Var x = concat_rows({modality.tokens, text.tokens});
  for (std::size_t b = 0; b < depth; ++b) x = transformer_block(p, x, prefix + ".block" + std::to_string(b), heads, act);
  auto [m, t] = split_rows(x, modality.size());
  return {{m, modality.modality}, {t, Modality::Text}};
}

/// Self-attention block over the concatenated vision and event tokens.
inline TokenSequence fuse_vision_event(ParamBinder& p, const TokenSequence& fv, const TokenSequence& fe, std::size_t heads,
                                       Activation act) {
  if (fv.dim() != fe.dim()) throw ContractError("fuse_vision_event: width mismatch");
  return {transformer_block(p, concat_rows({fv.tokens, fe.tokens}), "sa_ve.block0", heads, act), Modality::Vision};
}

/// Text tokens query the fused tokens; one output row per class, with a
/// residual connection from the query.
inline TokenSequence cross_attention(ParamBinder& p, const TokenSequence& text, const TokenSequence& fused,
                                     const std::string& branch) {
  if (branch != "ca_vt" && branch != "ca_et") throw ContractError("cross_attention: unknown branch '" + branch + "'");
  if (text.dim() != fused.dim()) throw ContractError(branch + ": width mismatch");
  Var q = linear(p, text.tokens, branch + ".q");
  Var k = linear(p, fused.tokens, branch + ".k");
  Var v = linear(p, fused.tokens, branch + ".v");
  return {add(text.tokens, scaled_dot_attention(q, k, v)), Modality::Text};
}

struct ClassifierOutput {
  Var logits;  // [1 x L]
  Var pooled;  // [1 x dim], the pre-classifier feature
};

/// Final fusion blocks over [fused; ca_vt; ca_et], mean pooling, one FC layer.
inline ClassifierOutput classify(ParamBinder& p, const TokenSequence& fused, const TokenSequence& ca_vt,
                                 const TokenSequence& ca_et, std::size_t depth, std::size_t heads, Activation act) {
  if (fused.dim() != ca_vt.dim() || fused.dim() != ca_et.dim()) throw ContractError("classify: width mismatch");
  Var x = concat_rows({fused.tokens, ca_vt.tokens, ca_et.tokens});
  for (std::size_t b = 0; b < depth; ++b) x = transformer_block(p, x, "final.block" + std::to_string(b), heads, act);
  Var pooled = mean_rows(x);
  return {linear(p, pooled, "classifier"), pooled};
}

/// Encoder outputs concatenated across frames along the token axis.
struct EncodedInputs {
  TokenSequence vision;
  TokenSequence event;
};

inline std::size_t encoder_depth(const EncoderConfig& cfg, const AblationSwitches& sw) {
  return sw.lvm ? cfg.depth : cfg.shallow_depth;
}

inline EncodedInputs encode_inputs(ParamBinder& p, const SafeModel& model, const VideoClip& clip,
                                   const EventFrameSequence& events, const AblationSwitches& sw) {
  if (clip.size() != events.size())
    throw ContractError("safe_forward: " + std::to_string(clip.size()) + " RGB frames but " +
                        std::to_string(events.size()) + " event frames");
  const auto& cfg = model.cfg;
  auto join = [](const std::vector<TokenSequence>& seqs, Modality m) {
    std::vector<Var> parts;
    for (const auto& s : seqs) parts.push_back(s.tokens);
    return TokenSequence{concat_rows(parts), m};
  };
  auto fv = encode_clip(p, clip, cfg.rgb, "rgb_encoder", encoder_depth(cfg.rgb, sw), cfg.activation);
  auto fe = encode_clip(p, events, cfg.event, "event_encoder", encoder_depth(cfg.event, sw), cfg.activation);
  return {join(fv, Modality::Vision), join(fe, Modality::Event)};
}

/// Class tokens: prompt-encoded labels, or free learned tokens with SCI off.
inline TokenSequence class_tokens(ParamBinder& p, const SafeModel& model, const AblationSwitches& sw) {
  if (!sw.sci) return {p("free_text.tokens"), Modality::Text};
  return encode_labels(p, model.labels, model.prompt, model.vocab, model.cfg.text, model.cfg.activation);
}

inline ClassifierOutput fuse_and_classify(ParamBinder& p, const SafeModel& model, const EncodedInputs& enc,
                                          const AblationSwitches& sw) {
  const auto& f = model.cfg.fusion;
  const auto act = model.cfg.activation;
  const TokenSequence text = class_tokens(p, model, sw);

  TokenSequence fv = enc.vision, fe = enc.event, text_vt = text, text_et = text;
  if (sw.mt) {
    std::tie(fv, text_vt) = multimodal_transformer(p, enc.vision, text, "mt_vt", f.depth, f.heads, act);
    std::tie(fe, text_et) = multimodal_transformer(p, enc.event, text, "mt_et", f.depth, f.heads, act);
  }

  TokenSequence fused = sw.sa ? fuse_vision_event(p, fv, fe, f.heads, act)
                              : TokenSequence{concat_rows({fv.tokens, fe.tokens}), Modality::Vision};

  TokenSequence ca_vt = text, ca_et = text;
  if (sw.ca) {
    auto [vis_part, ev_part] = split_rows(fused.tokens, fv.size());
    ca_vt = cross_attention(p, text_vt, {vis_part, Modality::Vision}, "ca_vt");
    ca_et = cross_attention(p, text_et, {ev_part, Modality::Event}, "ca_et");
  }
  return classify(p, fused, ca_vt, ca_et, f.depth, f.heads, act);
}

inline ClassifierOutput safe_forward(ParamBinder& p, const SafeModel& model, const VideoClip& clip,
                                     const EventFrameSequence& events, const AblationSwitches& sw) {
  return fuse_and_classify(p, model, encode_inputs(p, model, clip, events, sw), sw);
}

}  // namespace safe
