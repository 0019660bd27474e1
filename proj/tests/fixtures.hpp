#pragma once

#include <random>

#include "oracles.hpp"
#include "safe/dataset.hpp"
#include "safe/fusion.hpp"

namespace fixture {

/// Small model: 16 px frames, 8 px patches, width 8, two heads.
inline safe::ModelConfig tiny_model(std::size_t depth = 1) {
  safe::ModelConfig cfg;
  for (auto* e : {&cfg.rgb, &cfg.event}) {
    e->image_size = 16;
    e->patch_size = 8;
    e->dim = 8;
    e->depth = depth;
    e->heads = 2;
    e->mlp_ratio = 2;
    e->shallow_depth = std::min<std::size_t>(1, depth);
  }
  cfg.text.depth = 1;
  cfg.text.max_len = 8;
  cfg.text.heads = 2;
  cfg.fusion.dim = 8;
  cfg.fusion.depth = depth;
  cfg.fusion.heads = 2;
  return cfg;
}

inline safe::SynthSpec tiny_spec(std::size_t classes = 3, std::size_t frames = 2) {
  safe::SynthSpec s;
  s.classes = classes;
  s.resolution = 16;
  s.frames = frames;
  return s;
}

inline safe::Tensor random_tensor(safe::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  safe::Tensor t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

/// Overwrites every parameter with N(0, scale) so oracles see non-trivial weights.
inline void randomize(safe::ParamStore& p, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (const auto& name : p.names())
    for (auto& v : p.at(name).data()) v = n(rng);
}

inline double max_abs_diff(const safe::Tensor& a, const oracle::Mat& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b.v[i]));
  return m;
}

}  // namespace fixture
