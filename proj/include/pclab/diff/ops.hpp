#pragma once

// Differentiable primitives. Every function records one node on the tape of
// its first tensor argument; all tensor arguments must share that tape.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "pclab/diff/tensor.hpp"

namespace pclab::diff {

// Elementwise arithmetic with numpy-style (right-aligned) broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact (erf) form

Tensor reshape(const Tensor& x, Shape shape);
// Swaps the last two axes.
Tensor transpose_last2(const Tensor& x);
// Columns [start, start + len) of the last axis.
Tensor slice_last(const Tensor& x, std::size_t start, std::size_t len);
// Stacks equally-shaped tensors along a new trailing axis.
Tensor stack_last(std::span<const Tensor> parts);

// (..., M, K) x (K, N) -> (..., M, N)
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& x);                     // -> scalar
Tensor mean(const Tensor& x);                    // -> scalar
Tensor sum(const Tensor& x, std::size_t axis);   // removes axis
Tensor logsumexp(const Tensor& x, std::size_t axis);  // removes axis
Tensor softmax(const Tensor& x);      // over the last axis
Tensor log_softmax(const Tensor& x);  // over the last axis

// table (V, d), ids -> (ids_shape..., d)
Tensor embedding(const Tensor& table, std::span<const std::uint32_t> ids, Shape ids_shape);
// x (..., V), one index per leading position -> (...)
Tensor gather_last(const Tensor& x, std::span<const std::uint32_t> index);
// table (G, C, V), ids (B, G) -> (B, G, C) with out[b,g,c] = table[g,c,ids[b,g]]
Tensor gather_table(const Tensor& table, std::span<const std::uint32_t> ids, std::size_t batch);

// Log-space matrix product: x (B, G, K), w (G or 1, C, K) ->
// out[b,g,c] = logsumexp_k(x[b,g,k] + w[g,c,k]).
Tensor log_matmul(const Tensor& x, const Tensor& w);

// Normalizes over the last axis, then applies gain and bias (both shape (d)).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Inverted dropout. The keep-mask is drawn from rng at record time so replay
// and backward see the same mask. Identity when !training or rate == 0.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng, bool training);

// Row-major T x T mask: allowed[i * T + j] == true iff query i may attend key j.
// Disallowed scores receive -inf before the softmax. Every row must allow at
// least one key.
struct AttentionMask {
  std::size_t length = 0;
  std::vector<std::uint8_t> allowed;

  static AttentionMask causal(std::size_t length);
  bool operator()(std::size_t i, std::size_t j) const { return allowed[i * length + j] != 0; }
};

// Multi-head scaled dot-product attention on q, k, v of shape (B, T, d).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 const AttentionMask& mask);

// Mean of -log_softmax(logits)[target] over rows whose mask entry is set.
// logits (..., V); targets/mask have one entry per leading position.
Tensor cross_entropy(const Tensor& logits, std::span<const std::uint32_t> targets,
                     std::span<const std::uint8_t> mask);

}  // namespace pclab::diff
