#pragma once

#include <span>
#include <string>
#include <vector>

#include "safe/events.hpp"
#include "safe/image.hpp"
#include "safe/nn.hpp"

namespace safe {

enum class Modality { Vision, Event, Text };

inline const char* to_string(Modality m) {
  switch (m) {
    case Modality::Vision: return "vision";
    case Modality::Event: return "event";
    case Modality::Text: return "text";
  }
  return "?";
}

/// Patch-embedding transformer encoder. Full scale is 224/16/768/12 with
/// 197 tokens per frame; the desk default is 32/8/64/2 with 17.
struct EncoderConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t dim = 64;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  bool frozen = true;
  // Depth used when the large-encoder switch is off; always trainable.
  std::size_t shallow_depth = 1;

  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t tokens_per_frame() const { return patches_per_side() * patches_per_side() + 1; }
  std::size_t patch_dim() const { return patch_size * patch_size * 3; }

  void validate(const std::string& name) const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw ConfigError(name + ": image_size " + std::to_string(image_size) + " must be a positive multiple of patch_size " +
                        std::to_string(patch_size));
    if (dim == 0 || heads == 0 || dim % heads != 0)
      throw ConfigError(name + ": dim " + std::to_string(dim) + " must be divisible by heads " + std::to_string(heads));
    if (mlp_ratio == 0) throw ConfigError(name + ": mlp_ratio must be positive");
    if (shallow_depth > depth) throw ConfigError(name + ": shallow_depth may not exceed depth");
  }
};

/// A (tokens x dim) matrix plus the modality it came from.
struct TokenSequence {
  Var tokens;
  Modality modality = Modality::Vision;

  std::size_t size() const { return tokens.rows(); }
  std::size_t dim() const { return tokens.cols(); }
};

inline void add_encoder_params(ParamStore& store, ParamInit& init, const std::string& prefix, const EncoderConfig& cfg) {
  add_linear_params(store, init, prefix + ".patch", cfg.patch_dim(), cfg.dim);
  store.add(prefix + ".cls", init.normal({1, cfg.dim}));
  store.add(prefix + ".pos", init.normal({cfg.tokens_per_frame(), cfg.dim}));
  for (std::size_t b = 0; b < cfg.depth; ++b)
    add_block_params(store, init, prefix + ".block" + std::to_string(b), cfg.dim, cfg.dim * cfg.mlp_ratio);
}

/// Resizes to image_size and flattens non-overlapping patches row-major;
/// each row is one patch laid out as (dy, dx, channel).
inline Tensor patchify(const Image& frame, const EncoderConfig& cfg) {
  if (frame.channels != 3) throw ContractError("patchify: expected 3 channels, got " + std::to_string(frame.channels));
  if (!frame.all_finite()) throw NumericError("patchify: non-finite pixel values");
  const Image img = resize_bilinear(frame, cfg.image_size, cfg.image_size);
  const std::size_t side = cfg.patches_per_side(), ps = cfg.patch_size;
  Tensor out({side * side, cfg.patch_dim()});
  for (std::size_t py = 0; py < side; ++py)
    for (std::size_t px = 0; px < side; ++px) {
      double* row = out.row(py * side + px).data();
      std::size_t i = 0;
      for (std::size_t dy = 0; dy < ps; ++dy)
        for (std::size_t dx = 0; dx < ps; ++dx)
          for (std::size_t c = 0; c < 3; ++c) row[i++] = img.at(px * ps + dx, py * ps + dy, c);
    }
  return out;
}

/// Class token prepended to projected patches, positional embeddings added.
inline TokenSequence patchify_embed(ParamBinder& p, const Image& frame, const EncoderConfig& cfg, const std::string& prefix,
                                    Modality modality) {
  Graph& g = p.graph();
  Var patches = linear(p, g.constant(patchify(frame, cfg)), prefix + ".patch");
  Var tokens = add(concat_rows({p(prefix + ".cls"), patches}), p(prefix + ".pos"));
  return {tokens, modality};
}

/// Runs the first `depth` blocks of the encoder stack.
inline TokenSequence encoder_forward(ParamBinder& p, TokenSequence tokens, const EncoderConfig& cfg,
                                     const std::string& prefix, std::size_t depth, Activation act) {
  if (tokens.dim() != cfg.dim)
    throw ContractError(prefix + ": token width " + std::to_string(tokens.dim()) + " does not match dim " +
                        std::to_string(cfg.dim));
  if (depth > cfg.depth) throw ContractError(prefix + ": requested depth exceeds configured depth");
  Var x = tokens.tokens;
  for (std::size_t b = 0; b < depth; ++b) x = transformer_block(p, x, prefix + ".block" + std::to_string(b), cfg.heads, act);
  return {x, tokens.modality};
}

/// Independent per-frame encoding.
inline std::vector<TokenSequence> encode_frames(ParamBinder& p, std::span<const Image> frames, const EncoderConfig& cfg,
                                                const std::string& prefix, Modality modality, std::size_t depth,
                                                Activation act) {
  if (frames.empty()) throw ContractError(prefix + ": cannot encode an empty clip");
  std::vector<TokenSequence> out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(encoder_forward(p, patchify_embed(p, f, cfg, prefix, modality), cfg, prefix, depth, act));
  return out;
}

inline std::vector<TokenSequence> encode_clip(ParamBinder& p, const VideoClip& clip, const EncoderConfig& cfg,
                                              const std::string& prefix, std::size_t depth, Activation act) {
  return encode_frames(p, clip.frames, cfg, prefix, Modality::Vision, depth, act);
}

inline std::vector<TokenSequence> encode_clip(ParamBinder& p, const EventFrameSequence& seq, const EncoderConfig& cfg,
                                              const std::string& prefix, std::size_t depth, Activation act) {
  std::vector<Image> rgb;
  rgb.reserve(seq.size());
  for (const auto& f : seq.frames) rgb.push_back(event_image_to_rgb(f));
  return encode_frames(p, rgb, cfg, prefix, Modality::Event, depth, act);
}

}  // namespace safe
