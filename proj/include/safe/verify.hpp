#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "safe/dataset.hpp"
#include "safe/fusion.hpp"
#include "safe/gradcheck.hpp"

// Finite-difference suites behind the grad-check command.

namespace safe {

struct PrimitiveCheck {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  bool pass = false;
};

namespace detail {

struct PrimitiveCase {
  std::string op;
  std::vector<Shape> inputs;
  std::function<Var(std::span<const Var>)> build;
  bool away_from_zero = false;  // keep inputs off kinks (relu)
};

inline std::vector<PrimitiveCase> primitive_cases() {
  static const std::vector<std::size_t> ids{2, 0, 2, 1};
  return {
      {"add", {{3, 4}, {3, 4}}, [](auto x) { return add(x[0], x[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](auto x) { return sub(x[0], x[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](auto x) { return mul(x[0], x[1]); }},
      {"scale", {{3, 4}}, [](auto x) { return scale(x[0], -1.7); }},
      {"add_bias", {{3, 4}, {4}}, [](auto x) { return add_bias(x[0], x[1]); }},
      {"matmul", {{3, 5}, {5, 4}}, [](auto x) { return matmul(x[0], x[1]); }},
      {"matmul_nt", {{3, 5}, {4, 5}}, [](auto x) { return matmul_nt(x[0], x[1]); }},
      {"transpose", {{3, 4}}, [](auto x) { return transpose(x[0]); }},
      {"softmax_rows", {{3, 5}}, [](auto x) { return softmax_rows(x[0]); }},
      {"gelu", {{3, 4}}, [](auto x) { return gelu(x[0]); }},
      {"relu", {{3, 4}}, [](auto x) { return relu(x[0]); }, true},
      {"layer_norm", {{3, 6}, {6}, {6}}, [](auto x) { return layer_norm(x[0], x[1], x[2]); }},
      {"concat_rows", {{2, 3}, {3, 3}}, [](auto x) { return concat_rows({x[0], x[1]}); }},
      {"slice_rows", {{5, 3}}, [](auto x) { return slice_rows(x[0], 1, 3); }},
      {"split_rows", {{5, 3}}, [](auto x) {
         auto [a, b] = split_rows(x[0], 2);
         return concat_cols(std::vector<Var>{slice_rows(a, 0, 2), slice_rows(b, 1, 2)});
       }},
      {"slice_cols", {{3, 5}}, [](auto x) { return slice_cols(x[0], 1, 3); }},
      {"concat_cols", {{3, 2}, {3, 3}}, [](auto x) { return concat_cols(std::vector<Var>{x[0], x[1]}); }},
      {"mean_rows", {{4, 3}}, [](auto x) { return mean_rows(x[0]); }},
      {"sum", {{3, 4}}, [](auto x) { return sum(x[0]); }},
      {"gather_rows", {{3, 4}}, [](auto x) { return gather_rows(x[0], ids); }},
      {"cross_entropy", {{1, 6}}, [](auto x) { return cross_entropy(x[0], 4); }},
      {"attention_weights", {{3, 4}, {5, 4}}, [](auto x) { return attention_weights(x[0], x[1]); }},
      {"scaled_dot_attention", {{3, 4}, {5, 4}, {5, 2}},
       [](auto x) { return scaled_dot_attention(x[0], x[1], x[2]); }},
  };
}

}  // namespace detail

/// Every differentiable primitive, each checked at all input coordinates
/// through loss = sum(op(inputs) * R) with a fixed random R.
inline std::vector<PrimitiveCheck> primitive_grad_suite(double eps, double tol, std::uint64_t seed,
                                                        Graph::Options opts = {}) {
  std::vector<PrimitiveCheck> out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& c : detail::primitive_cases()) {
    ParamStore store;
    std::vector<std::string> names;
    std::vector<ParamCoord> coords;
    for (std::size_t i = 0; i < c.inputs.size(); ++i) {
      Tensor t(c.inputs[i]);
      for (auto& v : t.data()) {
        v = normal(rng);
        if (c.away_from_zero) v = (v < 0 ? -0.2 : 0.2) + v;
      }
      names.push_back("x" + std::to_string(i));
      for (std::size_t k = 0; k < t.size(); ++k) coords.push_back({names.back(), k});
      store.add(names.back(), std::move(t));
    }
    // Output shape from a dry run; R is fixed per case.
    Shape out_shape;
    {
      Graph g;
      ParamBinder b(g, store);
      std::vector<Var> xs;
      for (const auto& n : names) xs.push_back(b(n));
      out_shape = c.build(xs).shape();
    }
    Tensor r(out_shape);
    for (auto& v : r.data()) v = normal(rng);
    LossBuilder f = [&](ParamBinder& b) {
      std::vector<Var> xs;
      for (const auto& n : names) xs.push_back(b(n));
      Var y = c.build(xs);
      return sum(mul(y, b.graph().constant(r)));
    };
    const auto rep = finite_diff_check(f, store, eps, coords, opts);
    out.push_back({c.op, rep.max_rel_error, rep.checks.size(), rep.max_rel_error < tol});
  }
  return out;
}

struct ModelGradCheck {
  GradCheckReport report;
  std::map<std::string, double> by_group;
  bool pass = false;
};

/// End-to-end cross-entropy of one sample vs central differences. All
/// parameters (frozen ones included) take part so every group is covered.
inline ModelGradCheck model_grad_check(SafeModel& model, const Sample& sample, const AblationSwitches& sw, double eps,
                                       double tol, std::size_t min_coords, std::uint64_t seed,
                                       const std::vector<std::string>& only_groups = {}, Graph::Options opts = {}) {
  LossBuilder f = [&](ParamBinder& p) {
    return cross_entropy(safe_forward(p, model, sample.clip, sample.event_frames, sw).logits, sample.label);
  };
  std::vector<std::string> names;
  for (const auto& n : model.params.names())
    if (only_groups.empty() || std::find(only_groups.begin(), only_groups.end(), param_group(n)) != only_groups.end())
      names.push_back(n);
  const auto coords = sample_coords(model.params, names, min_coords, seed);
  ModelGradCheck out;
  out.report = finite_diff_check(f, model.params, eps, coords, opts);
  out.by_group = out.report.max_error_by_group();
  out.pass = out.report.max_rel_error < tol;
  return out;
}

}  // namespace safe
