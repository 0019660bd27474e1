#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "safe/events.hpp"

namespace safe {

enum class ShapeKind { Square, Disc, Bar };
enum class Direction { Right, Left, Up, Down };

/// `Static` renders the same flat RGB frame for every sample, so only the
/// event stream carries the class.
enum class RgbMode { Motion, Static };

struct SynthSpec {
  std::size_t classes = 4;
  std::size_t samples_per_class = 16;
  std::size_t resolution = 32;
  std::size_t frames = 3;
  double dvs_threshold = 0.3;
  std::int64_t frame_interval_us = 33333;
  RgbMode rgb_mode = RgbMode::Motion;
};

struct SynthSample {
  VideoClip clip;
  EventStream events;
  std::size_t label = 0;
  friend bool operator==(const SynthSample&, const SynthSample&) = default;
};

inline constexpr std::size_t kMaxSynthClasses = 12;

/// Class c moves shape c / 4 in direction c % 4.
struct MotionProgram {
  ShapeKind shape;
  Direction direction;
};

inline MotionProgram motion_program(std::size_t cls) {
  return {static_cast<ShapeKind>(cls / 4), static_cast<Direction>(cls % 4)};
}

inline std::string class_label(std::size_t cls) {
  static constexpr std::array<const char*, 3> shapes{"square", "disc", "bar"};
  static constexpr std::array<const char*, 4> dirs{"right", "left", "up", "down"};
  const auto prog = motion_program(cls);
  return std::string(shapes[static_cast<std::size_t>(prog.shape)]) + " moving " +
         dirs[static_cast<std::size_t>(prog.direction)];
}

inline std::vector<std::string> default_labels(std::size_t classes) {
  std::vector<std::string> out;
  for (std::size_t c = 0; c < classes; ++c) out.push_back(class_label(c));
  return out;
}

namespace detail {

struct ShapeInstance {
  ShapeKind kind;
  bool horizontal_motion;
  int size;
};

inline bool covers(const ShapeInstance& s, int cx, int cy, int x, int y) {
  const int half = s.size / 2;
  switch (s.kind) {
    case ShapeKind::Square:
      return x >= cx - half && x < cx - half + s.size && y >= cy - half && y < cy - half + s.size;
    case ShapeKind::Disc: {
      const double dx = x - cx, dy = y - cy, r = s.size / 2.0;
      return dx * dx + dy * dy <= r * r;
    }
    case ShapeKind::Bar: {
      // Thin along the motion axis, long across it.
      const int along = s.horizontal_motion ? x - cx : y - cy;
      const int across = s.horizontal_motion ? y - cy : x - cx;
      return along >= -1 && along < 1 && across >= -s.size && across < s.size;
    }
  }
  return false;
}

inline Image render_frame(const ShapeInstance& s, int cx, int cy, std::size_t res, const std::array<double, 3>& fg,
                          const std::array<double, 3>& bg) {
  Image img(res, res, 3);
  for (std::size_t y = 0; y < res; ++y)
    for (std::size_t x = 0; x < res; ++x) {
      const auto& col = covers(s, cx, cy, static_cast<int>(x), static_cast<int>(y)) ? fg : bg;
      for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = col[c];
    }
  return img;
}

}  // namespace detail

/// Renders one sample: N+1 motion frames feed the DVS simulator, the first N
/// become the RGB clip, so every RGB frame has a following event window.
inline SynthSample synth_sample(const SynthSpec& spec, std::size_t cls, std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> bg_dist(0.05, 0.3), fg_dist(0.6, 0.95);
  std::uniform_int_distribution<int> size_dist(5, 7), speed_dist(2, 3);

  const auto prog = motion_program(cls);
  const bool horizontal = prog.direction == Direction::Right || prog.direction == Direction::Left;
  detail::ShapeInstance shape{prog.shape, horizontal, size_dist(rng)};
  int speed = speed_dist(rng);
  std::array<double, 3> bg{}, fg{};
  for (auto& v : bg) v = bg_dist(rng);
  for (auto& v : fg) v = fg_dist(rng);

  const int res = static_cast<int>(spec.resolution);
  const int steps = static_cast<int>(spec.frames);
  const int extent = prog.shape == ShapeKind::Bar ? shape.size : shape.size / 2 + 1;
  const int motion_extent = prog.shape == ShapeKind::Bar ? 2 : shape.size / 2 + 1;
  // Slow down when the travel would not fit inside the frame.
  while (speed > 1 && 2 * motion_extent + speed * steps > res - 2) --speed;
  const int lo_motion = motion_extent, hi_motion = res - 1 - motion_extent - speed * steps;
  const int lo_cross = extent, hi_cross = res - 1 - extent;
  if (hi_motion < lo_motion || hi_cross < lo_cross)
    throw ContractError("synth: resolution " + std::to_string(res) + " too small for " + std::to_string(steps) + " frames");
  std::uniform_int_distribution<int> motion_pos(lo_motion, hi_motion), cross_pos(lo_cross, hi_cross);
  const int start_motion = motion_pos(rng);
  const int cross = cross_pos(rng);

  int dx = 0, dy = 0;
  switch (prog.direction) {
    case Direction::Right: dx = 1; break;
    case Direction::Left: dx = -1; break;
    case Direction::Up: dy = -1; break;
    case Direction::Down: dy = 1; break;
  }
  // Negative directions start at the far end so they travel the same range.
  const int travel = speed * steps;
  const int m0 = (dx < 0 || dy < 0) ? start_motion + travel : start_motion;

  VideoClip motion;
  for (int k = 0; k <= steps; ++k) {
    const int m = m0 + k * speed * (dx + dy);
    const int cx = horizontal ? m : cross;
    const int cy = horizontal ? cross : m;
    motion.frames.push_back(detail::render_frame(shape, cx, cy, spec.resolution, fg, bg));
    motion.timestamps.push_back(static_cast<std::int64_t>(k) * spec.frame_interval_us);
  }

  SynthSample out;
  out.label = cls;
  out.events = simulate_dvs(motion, spec.dvs_threshold);
  for (std::size_t k = 0; k < spec.frames; ++k) {
    out.clip.timestamps.push_back(motion.timestamps[k]);
    out.clip.frames.push_back(spec.rgb_mode == RgbMode::Motion ? motion.frames[k]
                                                               : Image(spec.resolution, spec.resolution, 3, 0.5));
  }
  return out;
}

/// Samples are ordered round-robin over classes: index i has class i % L.
inline std::vector<SynthSample> synth_dataset(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.classes < 2) throw ContractError("synth: need at least 2 classes");
  if (spec.classes > kMaxSynthClasses)
    throw ContractError("synth: at most " + std::to_string(kMaxSynthClasses) + " motion classes are defined");
  if (spec.frames < 1) throw ContractError("synth: need at least 1 frame");
  if (!(spec.dvs_threshold > 0.0)) throw ContractError("synth: DVS threshold must be positive");
  if (spec.frame_interval_us <= 0) throw ContractError("synth: frame interval must be positive");
  std::vector<SynthSample> out;
  out.reserve(spec.classes * spec.samples_per_class);
  for (std::size_t k = 0; k < spec.samples_per_class; ++k)
    for (std::size_t c = 0; c < spec.classes; ++c)
      out.push_back(synth_sample(spec, c, seed, out.size()));
  return out;
}

}  // namespace safe
