#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "safe/params.hpp"

namespace safe {

struct ParamCoord {
  std::string name;
  std::size_t index = 0;
};

struct CoordCheck {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<CoordCheck> checks;

  std::map<std::string, double> max_error_by_group() const {
    std::map<std::string, double> out;
    for (const auto& c : checks) {
      auto& slot = out[param_group(c.name)];
      slot = std::max(slot, c.rel_error);
    }
    return out;
  }
};

/// Builds a scalar loss from parameters bound into a fresh graph.
using LossBuilder = std::function<Var(ParamBinder&)>;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

inline double evaluate_loss(const LossBuilder& f, const ParamStore& params, Graph::Options opts = {}) {
  Graph g(opts);
  ParamBinder binder(g, params, [](const std::string&) { return false; });
  Var loss = f(binder);
  if (loss.value().size() != 1) throw ContractError("loss builder returned a non-scalar");
  return loss.value()[0];
}

/// Compares reverse-mode gradients against central differences at the given
/// coordinates. Parameters are perturbed in place and restored.
inline GradCheckReport finite_diff_check(const LossBuilder& f, ParamStore& params, double eps,
                                         std::span<const ParamCoord> coords, Graph::Options opts = {}) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw ContractError("finite_diff_check: eps must lie in (0, 1e-2]");
  const double base1 = evaluate_loss(f, params, opts);
  const double base2 = evaluate_loss(f, params, opts);
  if (std::bit_cast<std::uint64_t>(base1) != std::bit_cast<std::uint64_t>(base2))
    throw ContractError("finite_diff_check: loss is not deterministic");

  GradMap grads;
  {
    Graph g(opts);
    ParamBinder binder(g, params);
    Var loss = f(binder);
    g.backward(loss);
    grads = binder.gradients();
  }

  GradCheckReport report;
  for (const auto& c : coords) {
    Tensor& t = params.at(c.name);
    if (c.index >= t.size()) throw ContractError("finite_diff_check: index out of range for '" + c.name + "'");
    const double orig = t[c.index];
    t[c.index] = orig + eps;
    const double up = evaluate_loss(f, params, opts);
    t[c.index] = orig - eps;
    const double down = evaluate_loss(f, params, opts);
    t[c.index] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    auto it = grads.find(c.name);
    const double analytic = it == grads.end() ? 0.0 : it->second[c.index];
    CoordCheck cc{c.name, c.index, analytic, numeric, relative_error(analytic, numeric)};
    report.max_rel_error = std::max(report.max_rel_error, cc.rel_error);
    report.checks.push_back(std::move(cc));
  }
  return report;
}

/// One random coordinate per selected tensor, then extra random picks
/// round-robin until at least `min_total` coordinates exist.
inline std::vector<ParamCoord> sample_coords(const ParamStore& params, const std::vector<std::string>& names,
                                             std::size_t min_total, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<ParamCoord> out;
  if (names.empty()) return out;
  auto pick = [&](const std::string& n) {
    std::uniform_int_distribution<std::size_t> d(0, params.at(n).size() - 1);
    out.push_back({n, d(rng)});
  };
  for (const auto& n : names) pick(n);
  for (std::size_t i = 0; out.size() < min_total; ++i) pick(names[i % names.size()]);
  return out;
}

}  // namespace safe
