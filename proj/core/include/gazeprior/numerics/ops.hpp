#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "gazeprior/numerics/tensor.hpp"

namespace gazeprior::num {

// Contracts the last axis of `a` with the first axis of the rank-2 `b`.
// a: [..., k], b: [k, n] -> [..., n].
Tensor matmul(const Tensor& a, const Tensor& b);

// Binary ops accept identical shapes, a scalar on either side, or `b` whose
// shape is a trailing suffix of `a`'s shape (bias-style broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// `s` has a shape that is a leading prefix of `x`'s; each s entry scales the
// trailing block it indexes.
Tensor mul_prefix(const Tensor& x, const Tensor& s);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
Tensor neg(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);

Tensor relu(const Tensor& x);
// tanh approximation.
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
// Domain error on non-positive entries.
Tensor log(const Tensor& x);
// Domain error on negative entries.
Tensor sqrt(const Tensor& x);

enum class Activation { kRelu, kGelu, kSigmoid, kExp, kLog, kSqrt };
Tensor elementwise(Activation kind, const Tensor& x);

// Max-subtracted softmax over the last axis.
Tensor softmax(const Tensor& x);

// Normalizes the last axis; gamma/beta may be undefined for a plain norm.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Inverted dropout. Returns `x` itself when !training or p == 0.
Tensor dropout(const Tensor& x, double p, bool training, std::mt19937_64& rng);

// logits: [N, V]; targets has N entries; positions equal to ignore_index are
// skipped. Mean over the remaining positions; data error if none remain.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index = -100);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_last(const Tensor& x);
Tensor max_all(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
// Index along axis 0.
Tensor select(const Tensor& x, std::size_t index);
Tensor stack(const std::vector<Tensor>& parts);
Tensor concat_last(const Tensor& a, const Tensor& b);

// Row gather from a [V, d] table; output shape is ids_shape + [d].
Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& ids_shape);

// H: [B, L, d], weights: B*L constants -> [B, d], row b = sum_i w_bi H_bi.
Tensor weighted_row_sum(const Tensor& h, std::span<const double> weights);

// x: [n] placed at `positions` of a zero vector of length `length`.
Tensor scatter(const Tensor& x, std::span<const std::size_t> positions, std::size_t length);

// Multi-head scaled dot-product attention. q: [B, Lq, D], k/v: [B, Lk, D].
// key_mask (B*Lk, may be empty) removes keys with value 0. With `causal`,
// query i sees keys j <= i + (Lk - Lq).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 std::span<const double> key_mask, bool causal);

// -(i - mu_k)^2 / (2 sigma_k^2) for i in [0, length). mu, sigma: [K] -> [K, length].
Tensor gaussian_logits(const Tensor& mu, const Tensor& sigma, std::size_t length);

// Rescales each last-axis row whose L2 norm exceeds max_norm down to max_norm.
Tensor clip_row_norm(const Tensor& x, double max_norm);

}  // namespace gazeprior::num
