#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "safe/autodiff.hpp"

namespace safe {

/// Parameter names are dotted paths; the group is everything before the
/// first dot ("rgb_encoder.block0.attn.wq" -> "rgb_encoder").
inline std::string param_group(const std::string& name) { return name.substr(0, name.find('.')); }

/// Ordered collection of named learnable tensors.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value) {
    if (index_.contains(name)) throw ContractError("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({name, std::move(value)});
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Tensor& at(const std::string& name) { return entries_[lookup(name)].value; }
  const Tensor& at(const std::string& name) const { return entries_[lookup(name)].value; }

  std::size_t size() const { return entries_.size(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
  }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i)
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value)) return false;
    return true;
  }

 private:
  struct Entry {
    std::string name;
    Tensor value;
  };

  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using GradMap = std::map<std::string, Tensor>;

/// Binds store entries into one graph as leaves, on first use.
class ParamBinder {
 public:
  using GradPredicate = std::function<bool(const std::string& name)>;

  ParamBinder(Graph& graph, const ParamStore& store, GradPredicate requires_grad = {})
      : graph_(graph), store_(store), requires_grad_(std::move(requires_grad)) {}

  Var operator()(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    const bool rg = requires_grad_ ? requires_grad_(name) : true;
    Var v = graph_.leaf(store_.at(name), rg);
    bound_.emplace(name, v);
    return v;
  }

  Graph& graph() { return graph_; }
  bool is_bound(const std::string& name) const { return bound_.contains(name); }

  std::vector<std::string> bound_names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : bound_) out.push_back(k);
    return out;
  }

  /// Gradients of all bound parameters that received one.
  GradMap gradients() const {
    GradMap out;
    for (const auto& [name, v] : bound_)
      if (const Tensor* g = graph_.grad(v)) out.emplace(name, *g);
    return out;
  }

 private:
  Graph& graph_;
  const ParamStore& store_;
  GradPredicate requires_grad_;
  std::map<std::string, Var> bound_;
};

/// Seeded initializer; weights ~ Normal(0, std).
class ParamInit {
 public:
  explicit ParamInit(std::uint64_t seed, double std = 0.02) : rng_(seed), std_(std) {}

  Tensor normal(Shape shape) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, std_);
    for (auto& v : t.data()) v = dist(rng_);
    return t;
  }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

 private:
  std::mt19937_64 rng_;
  double std_;
};

// Checkpoint: <path> holds little-endian f64 values back to back, <path>.json
// maps each name to its shape and element offset.

inline std::filesystem::path checkpoint_manifest_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

inline void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  std::ofstream bin(path, std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot write checkpoint '" + path.string() + "'");
  nlohmann::json tensors = nlohmann::json::object();
  std::size_t offset = 0;
  for (const auto& name : store.names()) {
    const Tensor& t = store.at(name);
    bin.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    tensors[name] = {{"shape", t.shape()}, {"offset", offset}};
    offset += t.size();
  }
  if (!bin) throw IoError("short write on checkpoint '" + path.string() + "'");
  nlohmann::json manifest = {{"format", "safe-params"}, {"version", 1}, {"dtype", "f64le"}, {"count", offset},
                             {"tensors", tensors}};
  std::ofstream js(checkpoint_manifest_path(path), std::ios::trunc);
  if (!js) throw IoError("cannot write checkpoint manifest for '" + path.string() + "'");
  js << manifest.dump(2) << '\n';
}

/// Loads values into an already-shaped store; every store entry must be present.
inline void load_checkpoint(ParamStore& store, const std::filesystem::path& path) {
  std::ifstream js(checkpoint_manifest_path(path));
  if (!js) throw IoError("missing checkpoint manifest '" + checkpoint_manifest_path(path).string() + "'");
  nlohmann::json manifest;
  try {
    js >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint manifest: " + std::string(e.what()));
  }
  std::ifstream bin(path, std::ios::binary);
  if (!bin) throw IoError("missing checkpoint '" + path.string() + "'");
  std::vector<double> flat(manifest.at("count").get<std::size_t>());
  bin.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double)));
  if (bin.gcount() != static_cast<std::streamsize>(flat.size() * sizeof(double)))
    throw IoError("checkpoint '" + path.string() + "' is truncated");
  const auto& tensors = manifest.at("tensors");
  for (const auto& name : store.names()) {
    if (!tensors.contains(name)) throw IoError("checkpoint lacks parameter '" + name + "'");
    const auto& entry = tensors.at(name);
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    Tensor& t = store.at(name);
    if (shape != t.shape())
      throw IoError("checkpoint shape " + shape_str(shape) + " for '" + name + "' does not match model " +
                    shape_str(t.shape()));
    if (offset + t.size() > flat.size()) throw IoError("checkpoint offset out of range for '" + name + "'");
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), t.size(), t.data().begin());
  }
}

}  // namespace safe
