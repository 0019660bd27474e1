#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "safe/dataset.hpp"
#include "safe/trainer.hpp"

namespace safe {

struct DataConfig {
  std::size_t classes = 4;
  std::size_t train_per_class = 16;
  std::size_t eval_per_class = 4;
  std::size_t resolution = 32;
  std::size_t frames = 3;
  double dvs_threshold = 0.3;
  std::int64_t frame_interval_us = 33333;
  RgbMode rgb_mode = RgbMode::Motion;
  EventFormat event_format = EventFormat::Csv;
  std::string dir;          // read a dataset written by synth-data instead of synthesizing
  std::string labels_file;  // optional label text override, one per line

  SynthSpec spec() const {
    SynthSpec s;
    s.classes = classes;
    s.samples_per_class = train_per_class + eval_per_class;
    s.resolution = resolution;
    s.frames = frames;
    s.dvs_threshold = dvs_threshold;
    s.frame_interval_us = frame_interval_us;
    s.rgb_mode = rgb_mode;
    return s;
  }
};

struct SweepConfig {
  std::vector<std::size_t> frame_counts{1, 3, 5, 7};
  std::vector<std::string> templates{"This is a picture about Picture of {}", "The action in the picture is {}",
                                     "A photo of a {}", "The content of the playing card is {}", "NONE"};
};

struct GradCheckConfig {
  double primitive_eps = 1e-5;
  double primitive_tol = 1e-6;
  double model_eps = 1e-4;
  double model_tol = 1e-3;
  std::size_t min_coords = 32;
};

struct RunConfig {
  DataConfig data;
  ModelConfig model;
  AblationSwitches switches;
  OptimConfig optim;
  std::size_t ablate_seeds = 3;
  SweepConfig sweep;
  GradCheckConfig grad_check;
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  /// Resolves the label set: labels file, else the synthetic class names.
  std::vector<std::string> labels() const {
    if (!labels_file_labels.empty()) return labels_file_labels;
    return default_labels(data.classes);
  }

  void validate() const {
    if (data.classes < 2 || data.classes > kMaxSynthClasses)
      throw ConfigError("data.classes must lie in [2, " + std::to_string(kMaxSynthClasses) + "], got " +
                        std::to_string(data.classes));
    if (data.train_per_class == 0) throw ConfigError("data.train_per_class must be at least 1");
    if (data.resolution < 8) throw ConfigError("data.resolution must be at least 8");
    if (data.frames == 0) throw ConfigError("data.frames must be at least 1");
    if (!(data.dvs_threshold > 0.0)) throw ConfigError("data.dvs_threshold must be positive");
    if (data.frame_interval_us <= 0) throw ConfigError("data.frame_interval_us must be positive");
    model.validate();
    optim.validate();
    if (!(optim.base_lr > 0.0)) throw ConfigError("optim.base_lr must be positive");
    if (!labels_file_labels.empty() && labels_file_labels.size() != data.classes)
      throw ConfigError("data.labels_file has " + std::to_string(labels_file_labels.size()) + " labels but data.classes is " +
                        std::to_string(data.classes));
    if (ablate_seeds == 0) throw ConfigError("ablate.seeds must be at least 1");
    if (sweep.frame_counts.empty()) throw ConfigError("sweep.frame_counts must not be empty");
    for (auto n : sweep.frame_counts)
      if (n == 0) throw ConfigError("sweep.frame_counts entries must be positive");
    if (sweep.templates.empty()) throw ConfigError("sweep.templates must not be empty");
    for (const auto& t : sweep.templates) PromptTemplate{t};
    if (!(grad_check.primitive_eps > 0.0 && grad_check.primitive_eps <= 1e-2) ||
        !(grad_check.model_eps > 0.0 && grad_check.model_eps <= 1e-2))
      throw ConfigError("grad_check eps values must lie in (0, 1e-2]");
    if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
  }

  std::vector<std::string> labels_file_labels;
};

// ---- JSON ---------------------------------------------------------------------

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"dim", c.dim},
          {"depth", c.depth},           {"heads", c.heads},           {"mlp_ratio", c.mlp_ratio},
          {"frozen", c.frozen},         {"shallow_depth", c.shallow_depth}};
}

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& o = c.optim;
  return {
      {"data",
       {{"classes", c.data.classes},
        {"train_per_class", c.data.train_per_class},
        {"eval_per_class", c.data.eval_per_class},
        {"resolution", c.data.resolution},
        {"frames", c.data.frames},
        {"dvs_threshold", c.data.dvs_threshold},
        {"frame_interval_us", c.data.frame_interval_us},
        {"rgb_mode", c.data.rgb_mode == RgbMode::Motion ? "motion" : "static"},
        {"event_format", c.data.event_format == EventFormat::Csv ? "csv" : "binary"},
        {"dir", c.data.dir},
        {"labels_file", c.data.labels_file}}},
      {"rgb_encoder", to_json(m.rgb)},
      {"event_encoder", to_json(m.event)},
      {"text",
       {{"prompt", m.text.prompt},
        {"depth", m.text.depth},
        {"max_len", m.text.max_len},
        {"heads", m.text.heads},
        {"mlp_ratio", m.text.mlp_ratio},
        {"trainable", m.text.trainable}}},
      {"fusion",
       {{"dim", m.fusion.dim}, {"depth", m.fusion.depth}, {"heads", m.fusion.heads}, {"mlp_ratio", m.fusion.mlp_ratio}}},
      {"activation", to_string(m.activation)},
      {"switches",
       {{"sci", c.switches.sci}, {"lvm", c.switches.lvm}, {"mt", c.switches.mt}, {"sa", c.switches.sa}, {"ca", c.switches.ca}}},
      {"optim",
       {{"base_lr", o.base_lr},
        {"weight_decay", o.weight_decay},
        {"betas", {o.beta1, o.beta2}},
        {"adam_eps", o.adam_eps},
        {"epochs", o.epochs},
        {"batch_size", o.batch_size},
        {"schedule_floor_fraction", o.schedule_floor_fraction},
        {"warmup_steps", o.warmup_steps},
        {"grad_clip_norm", o.grad_clip_norm},
        {"eval_every", o.eval_every}}},
      {"ablate", {{"seeds", c.ablate_seeds}}},
      {"sweep", {{"frame_counts", c.sweep.frame_counts}, {"templates", c.sweep.templates}}},
      {"grad_check",
       {{"primitive_eps", c.grad_check.primitive_eps},
        {"primitive_tol", c.grad_check.primitive_tol},
        {"model_eps", c.grad_check.model_eps},
        {"model_tol", c.grad_check.model_tol},
        {"min_coords", c.grad_check.min_coords}}},
      {"seed", c.seed},
      {"out_dir", c.out_dir},
  };
}

namespace detail {

inline void check_known_keys(const nlohmann::json& j, const nlohmann::json& ref, const std::string& path) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!ref.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    if (ref[it.key()].is_object()) {
      if (!it->is_object()) throw ConfigError("config key '" + key + "' must be an object");
      check_known_keys(*it, ref[it.key()], key);
    }
  }
}

/// nlohmann converts between number kinds silently (-3 into a size_t wraps),
/// so the JSON kind is checked against the target type first.
template <class T>
bool kind_matches(const nlohmann::json& v) {
  if constexpr (std::is_same_v<T, bool>) return v.is_boolean();
  else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) return v.is_number_unsigned();
  else if constexpr (std::is_integral_v<T>) return v.is_number_integer();
  else if constexpr (std::is_floating_point_v<T>) return v.is_number();
  else if constexpr (std::is_same_v<T, std::string>) return v.is_string();
  else {
    if (!v.is_array()) return false;
    return std::all_of(v.begin(), v.end(), [](const auto& e) { return kind_matches<typename T::value_type>(e); });
  }
}

template <class T>
void read(const nlohmann::json& j, const char* section, const char* key, T& dst) {
  const auto& obj = section ? j.at(section) : j;
  if (!obj.contains(key)) return;
  const auto& v = obj.at(key);
  if (!kind_matches<T>(v))
    throw ConfigError("config key '" + (section ? std::string(section) + "." : std::string()) + key +
                      "' has the wrong type: " + v.dump());
  dst = v.get<T>();
}

inline void read_encoder(const nlohmann::json& j, const char* section, EncoderConfig& c) {
  read(j, section, "image_size", c.image_size);
  read(j, section, "patch_size", c.patch_size);
  read(j, section, "dim", c.dim);
  read(j, section, "depth", c.depth);
  read(j, section, "heads", c.heads);
  read(j, section, "mlp_ratio", c.mlp_ratio);
  read(j, section, "frozen", c.frozen);
  read(j, section, "shallow_depth", c.shallow_depth);
}

/// Sets a dotted key, e.g. "optim.base_lr", creating nothing new: the key
/// must already exist in `j`. The value is parsed as JSON when possible and
/// taken as a string otherwise.
inline void set_dotted(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  auto parsed = nlohmann::json::parse(raw, nullptr, false);
  *node = parsed.is_discarded() ? nlohmann::json(raw) : parsed;
}

}  // namespace detail

/// Builds a config from a JSON document layered over the defaults.
/// Unknown keys and mistyped values raise ConfigError.
inline RunConfig run_config_from_json(const nlohmann::json& overrides) {
  if (!overrides.is_object()) throw ConfigError("config must be a JSON object");
  const RunConfig defaults;
  nlohmann::json j = to_json(defaults);
  detail::check_known_keys(overrides, j, "");
  j.merge_patch(overrides);

  RunConfig c;
  auto& d = c.data;
  detail::read(j, "data", "classes", d.classes);
  detail::read(j, "data", "train_per_class", d.train_per_class);
  detail::read(j, "data", "eval_per_class", d.eval_per_class);
  detail::read(j, "data", "resolution", d.resolution);
  detail::read(j, "data", "frames", d.frames);
  detail::read(j, "data", "dvs_threshold", d.dvs_threshold);
  detail::read(j, "data", "frame_interval_us", d.frame_interval_us);
  std::string rgb_mode, event_format;
  detail::read(j, "data", "rgb_mode", rgb_mode);
  if (rgb_mode == "motion") d.rgb_mode = RgbMode::Motion;
  else if (rgb_mode == "static") d.rgb_mode = RgbMode::Static;
  else throw ConfigError("data.rgb_mode must be 'motion' or 'static', got '" + rgb_mode + "'");
  detail::read(j, "data", "event_format", event_format);
  try {
    d.event_format = parse_event_format(event_format);
  } catch (const Error& e) {
    throw ConfigError("data.event_format: " + std::string(e.what()));
  }
  detail::read(j, "data", "dir", d.dir);
  detail::read(j, "data", "labels_file", d.labels_file);

  detail::read_encoder(j, "rgb_encoder", c.model.rgb);
  detail::read_encoder(j, "event_encoder", c.model.event);
  auto& t = c.model.text;
  detail::read(j, "text", "prompt", t.prompt);
  detail::read(j, "text", "depth", t.depth);
  detail::read(j, "text", "max_len", t.max_len);
  detail::read(j, "text", "heads", t.heads);
  detail::read(j, "text", "mlp_ratio", t.mlp_ratio);
  detail::read(j, "text", "trainable", t.trainable);
  auto& f = c.model.fusion;
  detail::read(j, "fusion", "dim", f.dim);
  detail::read(j, "fusion", "depth", f.depth);
  detail::read(j, "fusion", "heads", f.heads);
  detail::read(j, "fusion", "mlp_ratio", f.mlp_ratio);
  std::string act;
  detail::read(j, nullptr, "activation", act);
  c.model.activation = parse_activation(act);

  auto& s = c.switches;
  detail::read(j, "switches", "sci", s.sci);
  detail::read(j, "switches", "lvm", s.lvm);
  detail::read(j, "switches", "mt", s.mt);
  detail::read(j, "switches", "sa", s.sa);
  detail::read(j, "switches", "ca", s.ca);

  auto& o = c.optim;
  detail::read(j, "optim", "base_lr", o.base_lr);
  detail::read(j, "optim", "weight_decay", o.weight_decay);
  std::vector<double> betas;
  detail::read(j, "optim", "betas", betas);
  if (betas.size() != 2) throw ConfigError("optim.betas must have exactly two entries");
  o.beta1 = betas[0];
  o.beta2 = betas[1];
  detail::read(j, "optim", "adam_eps", o.adam_eps);
  detail::read(j, "optim", "epochs", o.epochs);
  detail::read(j, "optim", "batch_size", o.batch_size);
  detail::read(j, "optim", "schedule_floor_fraction", o.schedule_floor_fraction);
  detail::read(j, "optim", "warmup_steps", o.warmup_steps);
  detail::read(j, "optim", "grad_clip_norm", o.grad_clip_norm);
  detail::read(j, "optim", "eval_every", o.eval_every);

  detail::read(j, "ablate", "seeds", c.ablate_seeds);
  detail::read(j, "sweep", "frame_counts", c.sweep.frame_counts);
  detail::read(j, "sweep", "templates", c.sweep.templates);
  auto& gc = c.grad_check;
  detail::read(j, "grad_check", "primitive_eps", gc.primitive_eps);
  detail::read(j, "grad_check", "primitive_tol", gc.primitive_tol);
  detail::read(j, "grad_check", "model_eps", gc.model_eps);
  detail::read(j, "grad_check", "model_tol", gc.model_tol);
  detail::read(j, "grad_check", "min_coords", gc.min_coords);
  detail::read(j, nullptr, "seed", c.seed);
  detail::read(j, nullptr, "out_dir", c.out_dir);
  c.optim.seed = c.seed;

  if (!d.labels_file.empty()) c.labels_file_labels = read_labels_file(d.labels_file);
  return c;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  auto j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw ConfigError("'" + path.string() + "' is not valid JSON");
  return j;
}

/// Loads a config file (or the defaults when `path` is empty), applies
/// --set style dotted overrides, and validates the result.
inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& sets = {}) {
  nlohmann::json j = path.empty() ? nlohmann::json::object() : read_json_file(path);
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (!sets.empty()) {
    nlohmann::json full = to_json(RunConfig{});
    detail::check_known_keys(j, full, "");
    full.merge_patch(j);
    for (const auto& s : sets) detail::set_dotted(full, s);
    j = std::move(full);
  }
  auto cfg = run_config_from_json(j);
  cfg.validate();
  return cfg;
}

}  // namespace safe
