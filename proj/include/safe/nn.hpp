#pragma once

#include <string>
#include <vector>

#include "safe/params.hpp"

// Building blocks shared by the encoders, the text branch and the fusion core.

namespace safe {

inline void add_linear_params(ParamStore& store, ParamInit& init, const std::string& prefix, std::size_t in,
                              std::size_t out) {
  store.add(prefix + ".w", init.normal({in, out}));
  store.add(prefix + ".b", ParamInit::zeros({out}));
}

inline void add_layer_norm_params(ParamStore& store, const std::string& prefix, std::size_t dim) {
  store.add(prefix + ".g", ParamInit::ones({dim}));
  store.add(prefix + ".b", ParamInit::zeros({dim}));
}

/// Pre-norm transformer block: x + MHA(LN(x)), then x + MLP(LN(x)).
inline void add_block_params(ParamStore& store, ParamInit& init, const std::string& prefix, std::size_t dim,
                             std::size_t hidden) {
  add_layer_norm_params(store, prefix + ".ln1", dim);
  for (const char* p : {"q", "k", "v", "o"}) add_linear_params(store, init, prefix + ".attn." + p, dim, dim);
  add_layer_norm_params(store, prefix + ".ln2", dim);
  add_linear_params(store, init, prefix + ".mlp.fc1", dim, hidden);
  add_linear_params(store, init, prefix + ".mlp.fc2", hidden, dim);
}

inline Var linear(ParamBinder& p, Var x, const std::string& prefix) {
  return add_bias(matmul(x, p(prefix + ".w")), p(prefix + ".b"));
}

inline Var layer_norm(ParamBinder& p, Var x, const std::string& prefix) {
  return layer_norm(x, p(prefix + ".g"), p(prefix + ".b"));
}

inline Var multi_head_self_attention(ParamBinder& p, Var x, const std::string& prefix, std::size_t heads) {
  const std::size_t dim = x.cols();
  if (heads == 0 || dim % heads != 0)
    throw ContractError(prefix + ": width " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                        " heads");
  Var q = linear(p, x, prefix + ".q");
  Var k = linear(p, x, prefix + ".k");
  Var v = linear(p, x, prefix + ".v");
  Var merged = [&] {
    if (heads == 1) return scaled_dot_attention(q, k, v);
    const std::size_t hd = dim / heads;
    std::vector<Var> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h)
      outs.push_back(scaled_dot_attention(slice_cols(q, h * hd, hd), slice_cols(k, h * hd, hd), slice_cols(v, h * hd, hd)));
    return concat_cols(outs);
  }();
  return linear(p, merged, prefix + ".o");
}

inline Var transformer_block(ParamBinder& p, Var x, const std::string& prefix, std::size_t heads, Activation act) {
  Var h = add(x, multi_head_self_attention(p, layer_norm(p, x, prefix + ".ln1"), prefix + ".attn", heads));
  Var m = linear(p, activate(linear(p, layer_norm(p, h, prefix + ".ln2"), prefix + ".mlp.fc1"), act), prefix + ".mlp.fc2");
  return add(h, m);
}

inline Activation parse_activation(const std::string& s) {
  if (s == "gelu") return Activation::Gelu;
  if (s == "relu") return Activation::Relu;
  throw ConfigError("unknown activation '" + s + "' (expected gelu or relu)");
}

inline std::string to_string(Activation a) { return a == Activation::Gelu ? "gelu" : "relu"; }

}  // namespace safe
