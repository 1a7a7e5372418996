#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "gmvit/nn_ops.hpp"
#include "gmvit/serialize.hpp"
#include "gmvit/tensor.hpp"

namespace gmvit {

/// Clamps values into [lo, hi]; the gradient passes through strictly
/// interior points and is zero at clamped ones.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t i = 0; i < x.data().size(); ++i)
    out.data()[i] = std::min(std::max(x.data()[i], lo), hi);
  if (detail::tracking<T>({&x})) {
    detail::enable_out_grad(out);
    auto xn = x.node(), on = out.node();
    Tape<T>::current()->push([xn, on, lo, hi] {
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        if (xn->value[i] > lo && xn->value[i] < hi) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layers. Construction order is fixed, and every layer draws its init from
// the rng it is handed, so a (seed, config) pair fully determines the
// initial weights.
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, std::mt19937_64& rng) {
    weight = Tensor<T>::zeros({in, out});
    const T limit = std::sqrt(T(6) / static_cast<T>(in + out));
    weight.fill_uniform(rng, -limit, limit);
    bias = Tensor<T>::zeros({out});
    weight.set_requires_grad(true);
    bias.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return add_rowwise(matmul(x, weight), bias); }

  void collect(ParamMap<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight, false});
    out.push_back({prefix + ".bias", bias, false});
  }
};

template <typename T>
struct LayerNormLayer {
  Tensor<T> gain;
  Tensor<T> bias;

  LayerNormLayer() = default;
  explicit LayerNormLayer(std::int64_t d) {
    gain = Tensor<T>::full({d}, T(1));
    bias = Tensor<T>::zeros({d});
    gain.set_requires_grad(true);
    bias.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }

  void collect(ParamMap<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gain", gain, false});
    out.push_back({prefix + ".bias", bias, false});
  }
};

template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;

  BatchNormLayer() = default;
  explicit BatchNormLayer(std::int64_t c) {
    gamma = Tensor<T>::full({c}, T(1));
    beta = Tensor<T>::zeros({c});
    running_mean = Tensor<T>::zeros({c});
    running_var = Tensor<T>::full({c}, T(1));
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }

  Tensor<T> forward1d(const Tensor<T>& x, Mode mode) {
    return batch_norm1d(x, gamma, beta, running_mean, running_var, mode);
  }
  Tensor<T> forward2d(const Tensor<T>& x, Mode mode) {
    return batch_norm2d(x, gamma, beta, running_mean, running_var, mode);
  }

  void collect(ParamMap<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gamma", gamma, false});
    out.push_back({prefix + ".beta", beta, false});
    out.push_back({prefix + ".running_mean", running_mean, true});
    out.push_back({prefix + ".running_var", running_var, true});
  }
};

template <typename T>
struct Conv2dLayer {
  Tensor<T> kernel;  // [out x in x k x k]
  std::int64_t stride = 1, pad = 0;

  Conv2dLayer() = default;
  Conv2dLayer(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride_,
              std::int64_t pad_, std::mt19937_64& rng)
      : stride(stride_), pad(pad_) {
    kernel = Tensor<T>::zeros({out, in, k, k});
    const T stddev = std::sqrt(T(2) / static_cast<T>(in * k * k));
    kernel.fill_normal(rng, T(0), stddev);
    kernel.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, kernel, stride, pad); }

  void collect(ParamMap<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".kernel", kernel, false});
  }
};

/// Two-layer MLP with ReLU between, used for both camera-position
/// embeddings (3 -> D -> D); row i of the output depends only on row i of
/// the input.
template <typename T>
struct PosEmbedMlp {
  Linear<T> fc1, fc2;

  PosEmbedMlp() = default;
  PosEmbedMlp(std::int64_t in, std::int64_t d, std::mt19937_64& rng)
      : fc1(in, d, rng), fc2(d, d, rng) {}

  Tensor<T> forward(const Tensor<T>& pos) const { return fc2.forward(relu(fc1.forward(pos))); }

  void collect(ParamMap<T>& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }
};

// ---------------------------------------------------------------------------
// Transformer encoder block (pre-norm multi-head self-attention + GELU MLP,
// residual connections).
// ---------------------------------------------------------------------------

template <typename T>
struct MultiHeadSelfAttention {
  Linear<T> q, k, v, o;
  std::int64_t heads = 1;

  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(std::int64_t d, std::int64_t heads_, std::mt19937_64& rng)
      : q(d, d, rng), k(d, d, rng), v(d, d, rng), o(d, d, rng), heads(heads_) {
    detail::require(d % heads_ == 0, "attention: width " + detail::str(d) +
                                         " not divisible by " + detail::str(heads_) + " heads");
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    const std::int64_t d = x.cols();
    const std::int64_t dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Tensor<T> Q = q.forward(x), K = k.forward(x), V = v.forward(x);
    std::vector<Tensor<T>> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (std::int64_t h = 0; h < heads; ++h) {
      auto Qh = slice_cols(Q, h * dh, (h + 1) * dh);
      auto Kh = slice_cols(K, h * dh, (h + 1) * dh);
      auto Vh = slice_cols(V, h * dh, (h + 1) * dh);
      auto attn = softmax_rows(mul(matmul(Qh, transpose(Kh)), scale), T(1));
      outs.push_back(matmul(attn, Vh));
    }
    return o.forward(concat_cols(outs));
  }

  void collect(ParamMap<T>& out, const std::string& prefix) const {
    q.collect(out, prefix + ".q");
    k.collect(out, prefix + ".k");
    v.collect(out, prefix + ".v");
    o.collect(out, prefix + ".o");
  }
};

template <typename T>
struct VitBlock {
  LayerNormLayer<T> ln1, ln2;
  MultiHeadSelfAttention<T> attn;
  Linear<T> fc1, fc2;

  VitBlock() = default;
  VitBlock(std::int64_t d, std::int64_t heads, std::int64_t expansion, std::mt19937_64& rng)
      : ln1(d), ln2(d), attn(d, heads, rng), fc1(d, expansion * d, rng), fc2(expansion * d, d, rng) {}

  Tensor<T> forward(const Tensor<T>& x) const {
    auto y = add(x, attn.forward(ln1.forward(x)));
    return add(y, fc2.forward(gelu(fc1.forward(ln2.forward(y)))));
  }

  void collect(ParamMap<T>& out, const std::string& prefix) const {
    ln1.collect(out, prefix + ".ln1");
    attn.collect(out, prefix + ".attn");
    ln2.collect(out, prefix + ".ln2");
    fc1.collect(out, prefix + ".mlp.fc1");
    fc2.collect(out, prefix + ".mlp.fc2");
  }
};

}  // namespace gmvit
