#pragma once

// Parameterized building blocks shared by the encoders, adapters and decoder.
// Weights are stored input-major ([in, out]) so a layer is x * W + b.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "refformer/ops.hpp"
#include "refformer/rng.hpp"
#include "refformer/tensor.hpp"

namespace refformer {

/// Visitor signature used to enumerate parameters by canonical name.
template <class T>
using ParamVisitor = std::function<void(const std::string&, Tensor<T>&)>;

/// Symmetric uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], drawn in double so
/// float and double instantiations see the same values up to rounding.
template <class T>
Tensor<T> uniform_init(Shape shape, std::size_t fan_in, Philox& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> values(shape_numel(shape));
  for (T& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  Tensor<T> t(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  return t;
}

template <class T>
Tensor<T> constant_param(Shape shape, T value) {
  Tensor<T> t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

template <class T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Philox& rng)
      : weight(uniform_init<T>({in, out}, in, rng)), bias(constant_param<T>({out}, T(0))) {}

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.shape().back() != in_features())
      throw DimensionError("linear: input width " + std::to_string(x.shape().back()) +
                           " != " + std::to_string(in_features()));
    return add(matmul(x, weight), bias);
  }

  void zero() {
    for (T& v : weight.mutable_data()) v = T(0);
    for (T& v : bias.mutable_data()) v = T(0);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;
  T eps = T(1e-5);

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width)
      : gain(constant_param<T>({width}, T(1))), bias(constant_param<T>({width}, T(0))) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias, eps); }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".gain", gain);
    fn(prefix + ".bias", bias);
  }
};

/// Two-layer perceptron with a GELU between the layers.
template <class T>
struct Mlp {
  Linear<T> fc1;
  Linear<T> fc2;

  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden, std::size_t out, Philox& rng)
      : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }

  void zero() {
    fc1.zero();
    fc2.zero();
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fc1.visit(prefix + ".fc1", fn);
    fc2.visit(prefix + ".fc2", fn);
  }
};

/// Multi-head attention with separate query/key/value/output projections.
/// Serves as both MHSA (query == key == value input) and MHCA.
template <class T>
struct MultiHeadAttention {
  Linear<T> q_proj, k_proj, v_proj, o_proj;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t query_width, std::size_t kv_width, std::size_t width,
                     std::size_t num_heads, Philox& rng)
      : q_proj(query_width, width, rng),
        k_proj(kv_width, width, rng),
        v_proj(kv_width, width, rng),
        o_proj(width, query_width, rng),
        heads(num_heads) {}

  MultiHeadAttention(std::size_t width, std::size_t num_heads, Philox& rng)
      : MultiHeadAttention(width, width, width, num_heads, rng) {}

  Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& key, const Tensor<T>& value,
                       const std::vector<std::uint8_t>* key_mask = nullptr,
                       Tensor<T>* probs = nullptr) const {
    return o_proj(attention(q_proj(query), k_proj(key), v_proj(value), heads, key_mask, probs));
  }

  void zero() {
    q_proj.zero();
    k_proj.zero();
    v_proj.zero();
    o_proj.zero();
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    q_proj.visit(prefix + ".q", fn);
    k_proj.visit(prefix + ".k", fn);
    v_proj.visit(prefix + ".v", fn);
    o_proj.visit(prefix + ".o", fn);
  }
};

/// Pre-norm transformer block: x + MHSA(LN(x)), then + MLP(LN(.)).
template <class T>
struct TransformerLayer {
  LayerNorm<T> ln_attn;
  MultiHeadAttention<T> attn;
  LayerNorm<T> ln_mlp;
  Mlp<T> mlp;

  TransformerLayer() = default;
  TransformerLayer(std::size_t width, std::size_t heads, std::size_t mlp_ratio, Philox& rng)
      : ln_attn(width), attn(width, heads, rng), ln_mlp(width), mlp(width, width * mlp_ratio, width, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, const std::vector<std::uint8_t>* key_mask = nullptr,
                       Tensor<T>* probs = nullptr) const {
    const Tensor<T> h = ln_attn(x);
    const Tensor<T> mid = add(attn(h, h, h, key_mask, probs), x);
    return add(mlp(ln_mlp(mid)), mid);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    ln_attn.visit(prefix + ".ln_attn", fn);
    attn.visit(prefix + ".attn", fn);
    ln_mlp.visit(prefix + ".ln_mlp", fn);
    mlp.visit(prefix + ".mlp", fn);
  }
};

}  // namespace refformer
