#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "safe/image.hpp"

namespace safe {

enum class Polarity : std::uint8_t { Off = 0, On = 1 };

struct Resolution {
  std::size_t width = 0;
  std::size_t height = 0;
  friend bool operator==(const Resolution&, const Resolution&) = default;
};

/// One DVS event [x, y, t, p]; t in microseconds.
struct EventPoint {
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::int64_t t = 0;
  Polarity p = Polarity::Off;
  friend bool operator==(const EventPoint&, const EventPoint&) = default;
};

struct EventStream {
  Resolution resolution;
  std::vector<EventPoint> events;

  std::size_t size() const { return events.size(); }

  /// Stable sort by timestamp; equal stamps keep their input order.
  void sort() {
    std::stable_sort(events.begin(), events.end(), [](const EventPoint& a, const EventPoint& b) { return a.t < b.t; });
  }

  void validate() const {
    for (std::size_t i = 0; i < events.size(); ++i) {
      const auto& e = events[i];
      if (e.x >= resolution.width || e.y >= resolution.height)
        throw ValidationError("event " + std::to_string(i) + " at (" + std::to_string(e.x) + ", " +
                              std::to_string(e.y) + ") lies outside " + std::to_string(resolution.width) + "x" +
                              std::to_string(resolution.height));
      if (e.t < 0) throw ValidationError("event " + std::to_string(i) + " has a negative timestamp");
    }
  }

  friend bool operator==(const EventStream&, const EventStream&) = default;
};

/// One 2-channel image (ON counts, OFF counts) per video frame.
struct EventFrameSequence {
  std::vector<Image> frames;
  std::size_t size() const { return frames.size(); }
  friend bool operator==(const EventFrameSequence&, const EventFrameSequence&) = default;
};

enum class EventFormat { Csv, Binary };

inline EventFormat parse_event_format(std::string_view s) {
  if (s == "csv") return EventFormat::Csv;
  if (s == "binary" || s == "bin") return EventFormat::Binary;
  throw ConfigError("unknown event format '" + std::string(s) + "' (expected csv or binary)");
}

// ---- CSV -------------------------------------------------------------------

inline void write_events_csv(const EventStream& s, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << "x,y,t,p\n";
  for (const auto& e : s.events) os << e.x << ',' << e.y << ',' << e.t << ',' << static_cast<int>(e.p) << '\n';
  if (!os) throw IoError("short write on '" + path.string() + "'");
}

namespace detail {

template <class T>
bool parse_int(std::string_view field, T& out) {
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), out);
  return ec == std::errc() && ptr == field.data() + field.size();
}

}  // namespace detail

/// Without an explicit resolution, the tightest one covering all events is used.
inline EventStream parse_events_csv(const std::filesystem::path& path, std::optional<Resolution> resolution = {}) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line)) throw ParseError(path.string() + ": missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "x,y,t,p") throw ParseError(path.string() + ":1: expected header 'x,y,t,p'");
  EventStream s;
  std::size_t lineno = 1;
  std::size_t maxx = 0, maxy = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::string_view rest(line);
    std::string_view f[4];
    for (int i = 0; i < 4; ++i) {
      const auto comma = rest.find(',');
      if ((i < 3) == (comma == std::string_view::npos))
        throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected 4 comma-separated fields");
      f[i] = rest.substr(0, comma);
      rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    }
    EventPoint e;
    int p = -1;
    if (!detail::parse_int(f[0], e.x) || !detail::parse_int(f[1], e.y) || !detail::parse_int(f[2], e.t) ||
        !detail::parse_int(f[3], p) || (p != 0 && p != 1) || e.t < 0)
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": malformed event row '" + line + "'");
    e.p = static_cast<Polarity>(p);
    maxx = std::max<std::size_t>(maxx, e.x);
    maxy = std::max<std::size_t>(maxy, e.y);
    s.events.push_back(e);
  }
  s.resolution = resolution ? *resolution : Resolution{maxx + 1, maxy + 1};
  s.validate();
  s.sort();
  return s;
}

// ---- binary ----------------------------------------------------------------
// 16-byte header: "EVST", u16 version=1, u16 width, u16 height, u32 count,
// 2 pad bytes; then 13-byte records (u16 x, u16 y, i64 t, u8 p), little-endian.

namespace detail {

template <class T>
void put_le(std::vector<unsigned char>& out, T v) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<unsigned char>((u >> (8 * i)) & 0xFFu));
}

template <class T>
T get_le(const unsigned char* p) {
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
  return static_cast<T>(u);
}

}  // namespace detail

inline constexpr std::size_t kEventHeaderBytes = 16;
inline constexpr std::size_t kEventRecordBytes = 13;

inline void write_events_binary(const EventStream& s, const std::filesystem::path& path) {
  if (s.resolution.width > 0xFFFF || s.resolution.height > 0xFFFF)
    throw ContractError("binary events: resolution exceeds 16 bits");
  std::vector<unsigned char> buf;
  buf.reserve(kEventHeaderBytes + kEventRecordBytes * s.events.size());
  buf.insert(buf.end(), {'E', 'V', 'S', 'T'});
  detail::put_le<std::uint16_t>(buf, 1);
  detail::put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(s.resolution.width));
  detail::put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(s.resolution.height));
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(s.events.size()));
  detail::put_le<std::uint16_t>(buf, 0);
  for (const auto& e : s.events) {
    detail::put_le<std::uint16_t>(buf, e.x);
    detail::put_le<std::uint16_t>(buf, e.y);
    detail::put_le<std::int64_t>(buf, e.t);
    buf.push_back(static_cast<unsigned char>(e.p));
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("short write on '" + path.string() + "'");
}

inline EventStream parse_events_binary(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (buf.size() < kEventHeaderBytes || std::memcmp(buf.data(), "EVST", 4) != 0)
    throw ParseError(path.string() + ": missing EVST header");
  const auto version = detail::get_le<std::uint16_t>(buf.data() + 4);
  if (version != 1) throw ParseError(path.string() + ": unsupported version " + std::to_string(version));
  EventStream s;
  s.resolution = {detail::get_le<std::uint16_t>(buf.data() + 6), detail::get_le<std::uint16_t>(buf.data() + 8)};
  const auto count = detail::get_le<std::uint32_t>(buf.data() + 10);
  if (buf.size() != kEventHeaderBytes + kEventRecordBytes * count)
    throw ParseError(path.string() + ": header declares " + std::to_string(count) + " records but file holds " +
                     std::to_string((buf.size() - kEventHeaderBytes) / kEventRecordBytes));
  s.events.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const unsigned char* r = buf.data() + kEventHeaderBytes + kEventRecordBytes * i;
    auto& e = s.events[i];
    e.x = detail::get_le<std::uint16_t>(r);
    e.y = detail::get_le<std::uint16_t>(r + 2);
    e.t = detail::get_le<std::int64_t>(r + 4);
    if (r[12] > 1) throw ParseError(path.string() + ": record " + std::to_string(i) + " has polarity " + std::to_string(r[12]));
    e.p = static_cast<Polarity>(r[12]);
  }
  s.validate();
  s.sort();
  return s;
}

inline EventStream parse_events(const std::filesystem::path& path, EventFormat fmt,
                                std::optional<Resolution> resolution = {}) {
  if (fmt == EventFormat::Csv) return parse_events_csv(path, resolution);
  auto s = parse_events_binary(path);
  if (resolution && !(*resolution == s.resolution)) throw ValidationError(path.string() + ": resolution mismatch");
  return s;
}

inline void write_events(const EventStream& s, const std::filesystem::path& path, EventFormat fmt) {
  fmt == EventFormat::Csv ? write_events_csv(s, path) : write_events_binary(s, path);
}

// ---- stacking --------------------------------------------------------------

/// Index of the frame an event at time t belongs to: the largest j with
/// timestamps[j] <= t, clamped to 0 for events before the first frame.
inline std::size_t frame_index_for(std::span<const std::int64_t> timestamps, std::int64_t t) {
  auto it = std::upper_bound(timestamps.begin(), timestamps.end(), t);
  return it == timestamps.begin() ? 0 : static_cast<std::size_t>(it - timestamps.begin()) - 1;
}

/// Raw per-pixel ON/OFF counts per frame (channel 0 = ON, 1 = OFF).
inline std::vector<Image> stack_event_counts(const EventStream& stream, std::span<const std::int64_t> clip_timestamps,
                                             Resolution resolution) {
  if (clip_timestamps.empty()) throw ContractError("stack_events: no frame timestamps");
  for (std::size_t i = 1; i < clip_timestamps.size(); ++i)
    if (clip_timestamps[i] <= clip_timestamps[i - 1])
      throw ContractError("stack_events: frame timestamps must strictly increase");
  std::vector<Image> frames(clip_timestamps.size(), Image(resolution.width, resolution.height, 2));
  for (const auto& e : stream.events) {
    if (e.x >= resolution.width || e.y >= resolution.height)
      throw ValidationError("stack_events: event outside the frame resolution");
    const std::size_t j = frame_index_for(clip_timestamps, e.t);
    frames[j].at(e.x, e.y, e.p == Polarity::On ? 0 : 1) += 1.0;
  }
  return frames;
}

/// Event images aligned to frame timestamps, each scaled by its own max count.
inline EventFrameSequence stack_events(const EventStream& stream, std::span<const std::int64_t> clip_timestamps,
                                       Resolution resolution) {
  EventFrameSequence seq{stack_event_counts(stream, clip_timestamps, resolution)};
  for (auto& f : seq.frames) {
    const double mx = *std::max_element(f.data.begin(), f.data.end());
    if (mx > 0.0)
      for (auto& v : f.data) v /= mx;
  }
  return seq;
}

/// 3-channel view of an event image for the patch embedder: (ON, OFF, mean).
inline Image event_image_to_rgb(const Image& ev) {
  if (ev.channels != 2) throw ContractError("event image must have 2 channels");
  Image out(ev.width, ev.height, 3);
  for (std::size_t i = 0; i < ev.width * ev.height; ++i) {
    out.data[3 * i] = ev.data[2 * i];
    out.data[3 * i + 1] = ev.data[2 * i + 1];
    out.data[3 * i + 2] = 0.5 * (ev.data[2 * i] + ev.data[2 * i + 1]);
  }
  return out;
}

// ---- DVS simulation ----------------------------------------------------------

inline constexpr double kLogIntensityEps = 1e-3;

inline double luminance(const Image& img, std::size_t x, std::size_t y) {
  double s = 0.0;
  for (std::size_t c = 0; c < img.channels; ++c) s += img.at(x, y, c);
  return s / static_cast<double>(img.channels);
}

/// Per pixel and per consecutive frame pair, emits floor(|dlog| / threshold)
/// events with timestamps spread evenly inside the interval.
inline EventStream simulate_dvs(const VideoClip& clip, double threshold) {
  if (!(threshold > 0.0)) throw ContractError("simulate_dvs: threshold must be positive");
  if (clip.size() < 2) throw ContractError("simulate_dvs: need at least 2 frames");
  clip.validate();
  const std::size_t w = clip.frames[0].width, h = clip.frames[0].height;
  EventStream s;
  s.resolution = {w, h};
  std::vector<double> prev(w * h), cur(w * h);
  auto log_frame = [&](const Image& img, std::vector<double>& out) {
    if (img.width != w || img.height != h) throw ValidationError("simulate_dvs: frame size changes within clip");
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[y * w + x] = std::log(luminance(img, x, y) + kLogIntensityEps);
  };
  log_frame(clip.frames[0], prev);
  for (std::size_t f = 1; f < clip.size(); ++f) {
    log_frame(clip.frames[f], cur);
    const std::int64_t t0 = clip.timestamps[f - 1];
    const std::int64_t dt = clip.timestamps[f] - t0;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double delta = cur[y * w + x] - prev[y * w + x];
        // The slack absorbs rounding when |delta| is an exact multiple of threshold.
        const auto n = static_cast<std::int64_t>(std::floor(std::abs(delta) / threshold + 1e-9));
        const Polarity p = delta > 0 ? Polarity::On : Polarity::Off;
        for (std::int64_t k = 0; k < n; ++k)
          s.events.push_back({static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y), t0 + (k + 1) * dt / (n + 1), p});
      }
    }
    std::swap(prev, cur);
  }
  s.sort();
  return s;
}

}  // namespace safe
