#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "safe/tensor.hpp"

namespace safe {

enum class OpKind {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Scale,
  AddBias,
  MatMul,
  MatMulNT,
  Transpose,
  Softmax,
  Gelu,
  Relu,
  LayerNorm,
  ConcatRows,
  SliceRows,
  ConcatCols,
  SliceCols,
  MeanRows,
  Sum,
  GatherRows,
  CrossEntropy,
};

enum class Activation { Gelu, Relu };

inline constexpr double kLayerNormEps = 1e-5;

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

namespace detail {

// C[m x n] (+)= A[m x k] * B[k x n], all row-major.
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t k, std::size_t m, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

inline std::vector<double> transposed(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
  return t;
}

inline double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  const double t = std::tanh(c * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

}  // namespace detail

/// Define-by-run tape. Nodes are appended in evaluation order, so the node
/// index is a topological order and backward is a single reverse sweep.
class Graph {
 public:
  struct Options {
    // Negates the right-hand matmul gradient; negative control for grad checks.
    bool inject_fault = false;
  };

  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  explicit Graph(Options opts) : opts_(opts) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    Node n;
    n.kind = OpKind::Leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.is_leaf = true;
    return push(std::move(n));
  }

  Var constant(Tensor value) {
    Node n;
    n.kind = OpKind::Constant;
    n.value = std::move(value);
    n.is_leaf = true;
    return push(std::move(n));
  }

  Var record(OpKind kind, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    Node n;
    n.kind = kind;
    n.value = std::move(value);
    for (auto in : inputs) n.requires_grad = n.requires_grad || nodes_.at(in).requires_grad;
    n.inputs = std::move(inputs);
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  std::size_t size() const { return nodes_.size(); }
  const Options& options() const { return opts_; }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& value(Var v) const { return value(v.id); }
  OpKind kind(Var v) const { return nodes_.at(v.id).kind; }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

  /// Gradient accumulated at a node, or nullptr when none was produced.
  const Tensor* grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad.empty() ? nullptr : &n.grad;
  }

  /// Lazily zero-initialized gradient buffer; used by backward rules.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor();
  }

  /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
  /// calls; interior gradients are recomputed each call.
  void backward(Var loss) {
    if (loss.graph != this) throw ContractError("backward: loss belongs to another graph");
    const Tensor& lv = value(loss);
    if (lv.size() != 1)
      throw ContractError("backward: loss must be a scalar, got shape " + shape_str(lv.shape()));
    for (auto& n : nodes_)
      if (!n.is_leaf) n.grad = Tensor();
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss.id)[0] += 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.is_leaf || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

 private:
  struct Node {
    OpKind kind = OpKind::Constant;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool is_leaf = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Options opts_;
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

namespace detail {

inline Graph& same_graph(Var a, Var b, const char* op) {
  if (a.graph == nullptr || a.graph != b.graph) throw ContractError(std::string(op) + ": operands from different graphs");
  return *a.graph;
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class F>
Var elementwise_binary(Var a, Var b, OpKind kind, const char* name, F f, double da_coef, double db_coef) {
  Graph& g = same_graph(a, b, name);
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  require_same_shape(av, bv, name);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  const std::size_t ia = a.id, ib = b.id;
  return g.record(kind, std::move(out), {ia, ib}, [ia, ib, da_coef, db_coef](Graph& gr, std::size_t self) {
    const Tensor& go = *gr.grad(Var{&gr, self});
    if (gr.requires_grad(ia)) {
      Tensor& ga = gr.grad_buffer(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += da_coef * go[i];
    }
    if (gr.requires_grad(ib)) {
      Tensor& gb = gr.grad_buffer(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += db_coef * go[i];
    }
  });
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::elementwise_binary(a, b, OpKind::Add, "add", [](double x, double y) { return x + y; }, 1.0, 1.0);
}

inline Var sub(Var a, Var b) {
  return detail::elementwise_binary(a, b, OpKind::Sub, "sub", [](double x, double y) { return x - y; }, 1.0, -1.0);
}

/// Hadamard product.
inline Var mul(Var a, Var b) {
  Graph& g = detail::same_graph(a, b, "mul");
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  detail::require_same_shape(av, bv, "mul");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return g.record(OpKind::Mul, std::move(out), {ia, ib}, [ia, ib](Graph& gr, std::size_t self) {
    const Tensor& go = *gr.grad(Var{&gr, self});
    const Tensor& x = gr.value(ia);
    const Tensor& y = gr.value(ib);
    if (gr.requires_grad(ia)) {
      Tensor& ga = gr.grad_buffer(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i];
    }
    if (gr.requires_grad(ib)) {
      Tensor& gb = gr.grad_buffer(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * x[i];
    }
  });
}

inline Var scale(Var x, double c) {
  Graph& g = *x.graph;
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
  const std::size_t ix = x.id;
  return g.record(OpKind::Scale, std::move(out), {ix}, [ix, c](Graph& gr, std::size_t self) {
    const Tensor& go = *gr.grad(Var{&gr, self});
    Tensor& gx = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += c * go[i];
  });
}

/// x[m x n] + bias broadcast over rows; bias holds n values (any shape).
inline Var add_bias(Var x, Var bias) {
  Graph& g = detail::same_graph(x, bias, "add_bias");
  const Tensor& xv = g.value(x);
  const Tensor& bv = g.value(bias);
  detail::require_matrix(xv, "add_bias");
  const std::size_t m = xv.rows(), n = xv.cols();
  if (bv.size() != n)
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " does not match " + shape_str(xv.shape()));
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = xv[r * n + c] + bv[c];
  const std::size_t ix = x.id, ib = bias.id;
  return g.record(OpKind::AddBias, std::move(out), {ix, ib}, [ix, ib, m, n](Graph& gr, std::size_t self) {
    const Tensor& go = *gr.grad(Var{&gr, self});
    if (gr.requires_grad(ix)) {
      Tensor& gx = gr.grad_buffer(ix);
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    }
    if (gr.requires_grad(ib)) {
      Tensor& gb = gr.grad_buffer(ib);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += go[r * n + c];
    }
  });
}

/// a[m x k] * b[k x n].
inline Var matmul(Var a, Var b) {
  Graph& g = detail::same_graph(a, b, "matmul");
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k)
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
  Tensor out({m, n});
  detail::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n, false);
  const std::size_t ia = a.id, ib = b.id;
  return g.record(OpKind::MatMul, std::move(out), {ia, ib}, [ia, ib, m, k, n](Graph& gr, std::size_t self) {
    const Tensor& go = *gr.grad(Var{&gr, self});
    if (gr.requires_grad(ia)) {
      // dA = G * B^T
      auto bt = detail::transposed(gr.value(ib).data().data(), k, n);
      detail::gemm_nn(go.data().data(), bt.data(), gr.grad_buffer(ia).data().data(), m, n, k, true);
    }
    if (gr.requires_grad(ib)) {
      // dB = A^T * G
      Tensor& gb = gr.grad_buffer(ib);
      if (gr.options().inject_fault) {
        Tensor tmp({k, n});
        detail::gemm_tn_acc(gr.value(ia).data().data(), go.data().data(), tmp.data().data(), m, k, n);
        for (std::size_t i = 0; i < tmp.size(); ++i) gb[i] -= tmp[i];
      } else {
        detail::gemm_tn_acc(gr.value(ia).data().data(), go.data().data(), gb.data().data(), m, k, n);
      }
    }
  });
}

/// a[m x k] * b[n x k]^T.
inline Var matmul_nt(Var a, Var b) {
  Graph& g = detail::same_graph(a, b, "matmul_nt");
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  detail::require_matrix(av, "matmul_nt");
  detail::require_matrix(bv, "matmul_nt");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  if (bv.cols() != k)
    throw DimensionError("matmul_nt: widths disagree for " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  Tensor out({m, n});
  auto bt = detail::transposed(bv.data().data(), n, k);
  detail::gemm_nn(av.data().data(), bt.data(), out.data().data(), m, k, n, false);
  const std::size_t ia = a.id, ib = b.id;
  return g.record(OpKind::MatMulNT, std::move(out), {ia, ib}, [ia, ib, m, k, n](Graph& gr, std::size_t self) {
    const Tensor& go = *gr.grad(Var{&gr, self});
    if (gr.requires_grad(ia))  // dA = G * B
      detail::gemm_nn(go.data().data(), gr.value(ib).data().data(), gr.grad_buffer(ia).data().data(), m, n, k, true);
    if (gr.requires_grad(ib))  // dB = G^T * A
      detail::gemm_tn_acc(go.data().data(), gr.value(ia).data().data(), gr.grad_buffer(ib).data().data(), m, n, k);
  });
}

inline Var transpose(Var x) {
  Graph& g = *x.graph;
  const Tensor& xv = g.value(x);
  detail::require_matrix(xv, "transpose");
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out({n, m}, detail::transposed(xv.data().data(), m, n));
  const std::size_t ix = x.id;
  return g.record(OpKind::Transpose, std::move(out), {ix}, [ix, m, n](Graph& gr, std::size_t self) {
    const Tensor& go = *gr.grad(Var{&gr, self});
    Tensor& gx = gr.grad_buffer(ix);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += go[c * m + r];
  });
}

/// Row-wise softmax with per-row max subtraction.
inline Var softmax_rows(Var x) {
  Graph& g = *x.graph;
  const Tensor& xv = g.value(x);
  detail::require_matrix(xv, "softmax_rows");
  if (!xv.all_finite()) throw NumericError("softmax_rows: non-finite input");
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < m; ++r) {
    auto in = xv.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < n; ++c) o[c] /= s;
  }
  const std::size_t ix = x.id;
  return g.record(OpKind::Softmax, std::move(out), {ix}, [ix, m, n](Graph& gr, std::size_t self) {
    const Tensor& go = *gr.grad(Var{&gr, self});
    const Tensor& s = gr.value(self);
    Tensor& gx = gr.grad_buffer(ix);
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += go[r * n + c] * s[r * n + c];
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += s[r * n + c] * (go[r * n + c] - dot);
    }
  });
}

inline Var gelu(Var x) {
  Graph& g = *x.graph;
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::gelu(xv[i]);
  const std::size_t ix = x.id;
  return g.record(OpKind::Gelu, std::move(out), {ix}, [ix](Graph& gr, std::size_t self) {
    const Tensor& go = *gr.grad(Var{&gr, self});
    const Tensor& xin = gr.value(ix);
    Tensor& gx = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * detail::gelu_grad(xin[i]);
  });
}

inline Var relu(Var x) {
  Graph& g = *x.graph;
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  const std::size_t ix = x.id;
  return g.record(OpKind::Relu, std::move(out), {ix}, [ix](Graph& gr, std::size_t self) {
    const Tensor& go = *gr.grad(Var{&gr, self});
    const Tensor& xin = gr.value(ix);
    Tensor& gx = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < go.size(); ++i)
      if (xin[i] > 0.0) gx[i] += go[i];
  });
}

inline Var activate(Var x, Activation a) { return a == Activation::Gelu ? gelu(x) : relu(x); }

/// Per-row normalization to zero mean / unit variance, then gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias) {
  Graph& g = detail::same_graph(x, gain, "layer_norm");
  detail::same_graph(x, bias, "layer_norm");
  const Tensor& xv = g.value(x);
  detail::require_matrix(xv, "layer_norm");
  const std::size_t m = xv.rows(), n = xv.cols();
  if (g.value(gain).size() != n || g.value(bias).size() != n)
    throw DimensionError("layer_norm: gain/bias width does not match " + shape_str(xv.shape()));
  const Tensor& gv = g.value(gain);
  const Tensor& bv = g.value(bias);
  Tensor out(xv.shape());
  std::vector<double> xhat(m * n), inv(m);
  for (std::size_t r = 0; r < m; ++r) {
    auto in = xv.row(r);
    double mu = 0.0;
    for (double v : in) mu += v;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double v : in) var += (v - mu) * (v - mu);
    var /= static_cast<double>(n);
    inv[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (in[c] - mu) * inv[r];
      out[r * n + c] = xhat[r * n + c] * gv[c] + bv[c];
    }
  }
  const std::size_t ix = x.id, ig = gain.id, ib = bias.id;
  return g.record(OpKind::LayerNorm, std::move(out), {ix, ig, ib},
                  [ix, ig, ib, m, n, xhat = std::move(xhat), inv = std::move(inv)](Graph& gr, std::size_t self) {
                    const Tensor& go = *gr.grad(Var{&gr, self});
                    const Tensor& gv2 = gr.value(ig);
                    if (gr.requires_grad(ig)) {
                      Tensor& gg = gr.grad_buffer(ig);
                      for (std::size_t i = 0; i < m * n; ++i) gg[i % n] += go[i] * xhat[i];
                    }
                    if (gr.requires_grad(ib)) {
                      Tensor& gb = gr.grad_buffer(ib);
                      for (std::size_t i = 0; i < m * n; ++i) gb[i % n] += go[i];
                    }
                    if (gr.requires_grad(ix)) {
                      Tensor& gx = gr.grad_buffer(ix);
                      const double nn = static_cast<double>(n);
                      for (std::size_t r = 0; r < m; ++r) {
                        double mean_d = 0.0, mean_dx = 0.0;
                        for (std::size_t c = 0; c < n; ++c) {
                          const double d = go[r * n + c] * gv2[c];
                          mean_d += d;
                          mean_dx += d * xhat[r * n + c];
                        }
                        mean_d /= nn;
                        mean_dx /= nn;
                        for (std::size_t c = 0; c < n; ++c) {
                          const double d = go[r * n + c] * gv2[c];
                          gx[r * n + c] += inv[r] * (d - mean_d - xhat[r * n + c] * mean_dx);
                        }
                      }
                    }
                  });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Graph& g = *parts.front().graph;
  const std::size_t n = g.value(parts.front()).cols();
  std::size_t m = 0;
  std::vector<std::size_t> ids, offsets;
  for (const Var& p : parts) {
    if (p.graph != &g) throw ContractError("concat_rows: operands from different graphs");
    const Tensor& v = g.value(p);
    detail::require_matrix(v, "concat_rows");
    if (v.cols() != n)
      throw DimensionError("concat_rows: width " + std::to_string(v.cols()) + " does not match " + std::to_string(n));
    ids.push_back(p.id);
    offsets.push_back(m);
    m += v.rows();
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Tensor& v = g.value(ids[i]);
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offsets[i] * n));
  }
  return g.record(OpKind::ConcatRows, std::move(out), ids, [ids, offsets, n](Graph& gr, std::size_t self) {
    const Tensor& go = *gr.grad(Var{&gr, self});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!gr.requires_grad(ids[i])) continue;
      Tensor& gi = gr.grad_buffer(ids[i]);
      const std::size_t base = offsets[i] * n;
      for (std::size_t j = 0; j < gi.size(); ++j) gi[j] += go[base + j];
    }
  });
}

inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var slice_rows(Var x, std::size_t start, std::size_t count) {
  Graph& g = *x.graph;
  const Tensor& xv = g.value(x);
  detail::require_matrix(xv, "slice_rows");
  const std::size_t n = xv.cols();
  if (count == 0 || start + count > xv.rows())
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + shape_str(xv.shape()));
  Tensor out({count, n});
  std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>(start * n), count * n, out.data().begin());
  const std::size_t ix = x.id;
  return g.record(OpKind::SliceRows, std::move(out), {ix}, [ix, start, n](Graph& gr, std::size_t self) {
    const Tensor& go = *gr.grad(Var{&gr, self});
    Tensor& gx = gr.grad_buffer(ix);
    for (std::size_t j = 0; j < go.size(); ++j) gx[start * n + j] += go[j];
  });
}

inline std::pair<Var, Var> split_rows(Var x, std::size_t at) {
  const std::size_t m = x.rows();
  if (at == 0 || at >= m)
    throw DimensionError("split_rows: split point " + std::to_string(at) + " invalid for " + shape_str(x.shape()));
  return {slice_rows(x, 0, at), slice_rows(x, at, m - at)};
}

inline Var slice_cols(Var x, std::size_t start, std::size_t count) {
  Graph& g = *x.graph;
  const Tensor& xv = g.value(x);
  detail::require_matrix(xv, "slice_cols");
  const std::size_t m = xv.rows(), n = xv.cols();
  if (count == 0 || start + count > n)
    throw DimensionError("slice_cols: columns out of range for " + shape_str(xv.shape()));
  Tensor out({m, count});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < count; ++c) out[r * count + c] = xv[r * n + start + c];
  const std::size_t ix = x.id;
  return g.record(OpKind::SliceCols, std::move(out), {ix}, [ix, start, count, m, n](Graph& gr, std::size_t self) {
    const Tensor& go = *gr.grad(Var{&gr, self});
    Tensor& gx = gr.grad_buffer(ix);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < count; ++c) gx[r * n + start + c] += go[r * count + c];
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Graph& g = *parts.front().graph;
  const std::size_t m = g.value(parts.front()).rows();
  std::size_t n = 0;
  std::vector<std::size_t> ids, offsets, widths;
  for (const Var& p : parts) {
    if (p.graph != &g) throw ContractError("concat_cols: operands from different graphs");
    const Tensor& v = g.value(p);
    detail::require_matrix(v, "concat_cols");
    if (v.rows() != m) throw DimensionError("concat_cols: row count mismatch");
    ids.push_back(p.id);
    offsets.push_back(n);
    widths.push_back(v.cols());
    n += v.cols();
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Tensor& v = g.value(ids[i]);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < widths[i]; ++c) out[r * n + offsets[i] + c] = v[r * widths[i] + c];
  }
  return g.record(OpKind::ConcatCols, std::move(out), ids, [ids, offsets, widths, m, n](Graph& gr, std::size_t self) {
    const Tensor& go = *gr.grad(Var{&gr, self});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!gr.requires_grad(ids[i])) continue;
      Tensor& gi = gr.grad_buffer(ids[i]);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < widths[i]; ++c) gi[r * widths[i] + c] += go[r * n + offsets[i] + c];
    }
  });
}

/// Column-wise mean: [m x n] -> [1 x n].
inline Var mean_rows(Var x) {
  Graph& g = *x.graph;
  const Tensor& xv = g.value(x);
  detail::require_matrix(xv, "mean_rows");
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out({1, n});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[c] += xv[r * n + c];
  for (std::size_t c = 0; c < n; ++c) out[c] /= static_cast<double>(m);
  const std::size_t ix = x.id;
  return g.record(OpKind::MeanRows, std::move(out), {ix}, [ix, m, n](Graph& gr, std::size_t self) {
    const Tensor& go = *gr.grad(Var{&gr, self});
    Tensor& gx = gr.grad_buffer(ix);
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += go[c] * inv;
  });
}

inline Var sum(Var x) {
  Graph& g = *x.graph;
  const Tensor& xv = g.value(x);
  double s = 0.0;
  for (double v : xv.data()) s += v;
  const std::size_t ix = x.id;
  return g.record(OpKind::Sum, Tensor::scalar(s), {ix}, [ix](Graph& gr, std::size_t self) {
    const double go = (*gr.grad(Var{&gr, self}))[0];
    Tensor& gx = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go;
  });
}

/// Row lookup: out[i] = table[ids[i]].
inline Var gather_rows(Var table, std::span<const std::size_t> ids) {
  Graph& g = *table.graph;
  const Tensor& tv = g.value(table);
  detail::require_matrix(tv, "gather_rows");
  if (ids.empty()) throw ContractError("gather_rows: empty id list");
  const std::size_t n = tv.cols();
  Tensor out({ids.size(), n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows()) throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " out of range");
    std::copy_n(tv.row(ids[i]).begin(), n, out.row(i).begin());
  }
  const std::size_t it = table.id;
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return g.record(OpKind::GatherRows, std::move(out), {it}, [it, n, idv = std::move(idv)](Graph& gr, std::size_t self) {
    const Tensor& go = *gr.grad(Var{&gr, self});
    Tensor& gt = gr.grad_buffer(it);
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t c = 0; c < n; ++c) gt[idv[i] * n + c] += go[i * n + c];
  });
}

/// -log softmax(logits)[target] via log-sum-exp; logits may have any shape.
inline Var cross_entropy(Var logits, std::size_t target) {
  Graph& g = *logits.graph;
  const Tensor& lv = g.value(logits);
  const std::size_t L = lv.size();
  if (target >= L)
    throw ContractError("cross_entropy: target " + std::to_string(target) + " outside [0, " + std::to_string(L) + ")");
  if (!lv.all_finite()) throw NumericError("cross_entropy: non-finite logits");
  const double mx = *std::max_element(lv.data().begin(), lv.data().end());
  double s = 0.0;
  for (double v : lv.data()) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  const std::size_t il = logits.id;
  return g.record(OpKind::CrossEntropy, Tensor::scalar(lse - lv[target]), {il},
                  [il, target, lse](Graph& gr, std::size_t self) {
                    const double go = (*gr.grad(Var{&gr, self}))[0];
                    const Tensor& x = gr.value(il);
                    Tensor& gx = gr.grad_buffer(il);
                    for (std::size_t i = 0; i < x.size(); ++i)
                      gx[i] += go * (std::exp(x[i] - lse) - (i == target ? 1.0 : 0.0));
                  });
}

/// softmax(q k^T / sqrt(width)): the attention weights alone.
inline Var attention_weights(Var q, Var k) {
  if (q.cols() != k.cols())
    throw DimensionError("attention: query width " + shape_str(q.shape()) + " vs key width " + shape_str(k.shape()));
  return softmax_rows(scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(k.cols()))));
}

inline Var scaled_dot_attention(Var q, Var k, Var v) {
  if (k.rows() != v.rows())
    throw DimensionError("attention: " + std::to_string(k.rows()) + " keys but " + std::to_string(v.rows()) +
                         " values");
  return matmul(attention_weights(q, k), v);
}

}  // namespace safe
