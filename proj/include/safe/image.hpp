#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "safe/tensor.hpp"

namespace safe {

/// Interleaved (row, column, channel) image with values nominally in [0, 1].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, double fill = 0.0)
      : width(w), height(h), channels(c), data(w * h * c, fill) {}

  double& at(std::size_t x, std::size_t y, std::size_t c) { return data[(y * width + x) * channels + c]; }
  double at(std::size_t x, std::size_t y, std::size_t c) const { return data[(y * width + x) * channels + c]; }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// RGB frames with strictly increasing microsecond timestamps.
struct VideoClip {
  std::vector<Image> frames;
  std::vector<std::int64_t> timestamps;

  std::size_t size() const { return frames.size(); }

  void validate() const {
    if (frames.size() != timestamps.size()) throw ValidationError("clip: frame and timestamp counts differ");
    for (std::size_t i = 1; i < timestamps.size(); ++i)
      if (timestamps[i] <= timestamps[i - 1]) throw ValidationError("clip: timestamps must strictly increase");
  }

  friend bool operator==(const VideoClip&, const VideoClip&) = default;
};

/// Bilinear resampling with half-pixel centers and edge clamping; an
/// identity-sized resize returns the input unchanged.
inline Image resize_bilinear(const Image& src, std::size_t out_w, std::size_t out_h) {
  if (src.width == out_w && src.height == out_h) return src;
  Image dst(out_w, out_h, src.channels);
  const double sx = static_cast<double>(src.width) / static_cast<double>(out_w);
  const double sy = static_cast<double>(src.height) / static_cast<double>(out_h);
  const auto maxx = static_cast<double>(src.width - 1);
  const auto maxy = static_cast<double>(src.height - 1);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, maxy);
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, maxx);
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double top = src.at(x0, y0, c) * (1.0 - wx) + src.at(x1, y0, c) * wx;
        const double bot = src.at(x0, y1, c) * (1.0 - wx) + src.at(x1, y1, c) * wx;
        dst.at(x, y, c) = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return dst;
}

/// Binary PPM (P6, maxval 255). Values are clamped to [0,1] and rounded.
inline void write_ppm(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 3) throw ContractError("write_ppm: expected a 3-channel image");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("short write on '" + path.string() + "'");
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::string magic;
  std::size_t w = 0, h = 0;
  int maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P6" || w == 0 || h == 0 || maxval != 255) throw ParseError("'" + path.string() + "' is not an 8-bit P6 PPM");
  is.get();
  Image img(w, h, 3);
  std::vector<unsigned char> bytes(img.data.size());
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (is.gcount() != static_cast<std::streamsize>(bytes.size())) throw ParseError("'" + path.string() + "' is truncated");
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0;
  return img;
}

}  // namespace safe
