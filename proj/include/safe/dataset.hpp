#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "safe/synth.hpp"

namespace safe {

/// One training/evaluation example: RGB clip, raw events and the event
/// images stacked onto the clip's frame timestamps.
struct Sample {
  std::string id;
  std::size_t label = 0;
  VideoClip clip;
  EventStream events;
  EventFrameSequence event_frames;
};

using Dataset = std::vector<Sample>;

struct DatasetSplit {
  Dataset train;
  Dataset eval;
};

inline std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%06zu", index);
  return buf;
}

inline Sample make_sample(std::string id, std::size_t label, VideoClip clip, EventStream events) {
  Sample s{std::move(id), label, std::move(clip), std::move(events), {}};
  const Resolution res{s.clip.frames.at(0).width, s.clip.frames.at(0).height};
  s.event_frames = stack_events(s.events, s.clip.timestamps, res);
  return s;
}

/// Synthesizes train_per_class + eval_per_class samples per class; within
/// each class the first train_per_class go to the training split.
inline DatasetSplit synth_split(SynthSpec spec, std::size_t train_per_class, std::size_t eval_per_class,
                                std::uint64_t seed) {
  spec.samples_per_class = train_per_class + eval_per_class;
  auto raw = synth_dataset(spec, seed);
  DatasetSplit out;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const std::size_t k = i / spec.classes;
    auto& r = raw[i];
    auto s = make_sample(sample_id(i), r.label, std::move(r.clip), std::move(r.events));
    (k < train_per_class ? out.train : out.eval).push_back(std::move(s));
  }
  return out;
}

/// Replaces every event image with zeros (an event-blind input).
inline Dataset zero_event_frames(Dataset ds) {
  for (auto& s : ds)
    for (auto& f : s.event_frames.frames) std::fill(f.data.begin(), f.data.end(), 0.0);
  return ds;
}

// ---- on-disk layout ----------------------------------------------------------
//   <dir>/manifest.json, <dir>/labels.txt,
//   <dir>/samples/<id>/frame_NNN.ppm, events.csv|events.bin, meta.json

inline void write_labels_file(const std::vector<std::string>& labels, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  for (const auto& l : labels) os << l << '\n';
}

inline std::vector<std::string> read_labels_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open labels file '" + path.string() + "'");
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out.push_back(line);
  }
  return out;
}

inline void write_dataset(const DatasetSplit& split, const std::vector<std::string>& labels, const SynthSpec& spec,
                          EventFormat fmt, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "samples", ec);
  if (ec) throw IoError("cannot create '" + (dir / "samples").string() + "': " + ec.message());
  nlohmann::json samples = nlohmann::json::array();
  std::vector<std::size_t> hist(labels.size(), 0);
  auto emit = [&](const Sample& s, const char* split_name) {
    const fs::path sdir = dir / "samples" / s.id;
    fs::create_directories(sdir, ec);
    if (ec) throw IoError("cannot create '" + sdir.string() + "': " + ec.message());
    for (std::size_t f = 0; f < s.clip.size(); ++f) {
      char name[32];
      std::snprintf(name, sizeof name, "frame_%03zu.ppm", f);
      write_ppm(s.clip.frames[f], sdir / name);
    }
    const std::string ev_name = fmt == EventFormat::Csv ? "events.csv" : "events.bin";
    write_events(s.events, sdir / ev_name, fmt);
    nlohmann::json meta = {{"id", s.id},
                           {"label", s.label},
                           {"label_name", labels.at(s.label)},
                           {"split", split_name},
                           {"timestamps", s.clip.timestamps},
                           {"frames", s.clip.size()},
                           {"events", ev_name},
                           {"event_count", s.events.size()}};
    std::ofstream(sdir / "meta.json") << meta.dump(2) << '\n';
    ++hist[s.label];
    samples.push_back({{"id", s.id}, {"label", s.label}, {"split", split_name}, {"dir", "samples/" + s.id}});
  };
  for (const auto& s : split.train) emit(s, "train");
  for (const auto& s : split.eval) emit(s, "eval");
  write_labels_file(labels, dir / "labels.txt");
  nlohmann::json manifest = {{"format", "safe-synth"},
                             {"version", 1},
                             {"classes", labels},
                             {"resolution", spec.resolution},
                             {"frames", spec.frames},
                             {"dvs_threshold", spec.dvs_threshold},
                             {"frame_interval_us", spec.frame_interval_us},
                             {"event_format", fmt == EventFormat::Csv ? "csv" : "binary"},
                             {"class_histogram", hist},
                             {"samples", samples}};
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw IoError("cannot write manifest in '" + dir.string() + "'");
  os << manifest.dump(2) << '\n';
}

inline DatasetSplit read_dataset(const std::filesystem::path& dir, std::vector<std::string>* labels_out = nullptr) {
  namespace fs = std::filesystem;
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("no dataset manifest in '" + dir.string() + "'");
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("dataset manifest: " + std::string(e.what()));
  }
  if (labels_out) *labels_out = manifest.at("classes").get<std::vector<std::string>>();
  const auto fmt = parse_event_format(manifest.at("event_format").get<std::string>());
  const auto res = manifest.at("resolution").get<std::size_t>();
  DatasetSplit out;
  for (const auto& entry : manifest.at("samples")) {
    const fs::path sdir = dir / entry.at("dir").get<std::string>();
    std::ifstream ms(sdir / "meta.json");
    if (!ms) throw IoError("missing '" + (sdir / "meta.json").string() + "'");
    nlohmann::json meta;
    ms >> meta;
    VideoClip clip;
    clip.timestamps = meta.at("timestamps").get<std::vector<std::int64_t>>();
    for (std::size_t f = 0; f < clip.timestamps.size(); ++f) {
      char name[32];
      std::snprintf(name, sizeof name, "frame_%03zu.ppm", f);
      clip.frames.push_back(read_ppm(sdir / name));
    }
    clip.validate();
    auto events = parse_events(sdir / meta.at("events").get<std::string>(), fmt, Resolution{res, res});
    auto s = make_sample(entry.at("id").get<std::string>(), entry.at("label").get<std::size_t>(), std::move(clip),
                         std::move(events));
    (entry.at("split").get<std::string>() == "train" ? out.train : out.eval).push_back(std::move(s));
  }
  return out;
}

}  // namespace safe
