#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mse2d/tensor.hpp"

// Differentiable tensor operations. Every op records a backward rule on the
// active tape when at least one input requires grad; otherwise it is a plain
// forward computation.
namespace mse2d::ops {

inline constexpr double kLayerNormEps = 1e-5;

// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x[..., n] + bias[n], broadcast over leading axes.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

// tanh approximation of GELU.
Tensor gelu(const Tensor& x);

// Normalizes over the last axis, then applies gain and bias (both [n]).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps);

// Max-stabilized softmax along `axis`. With a mask (same element count as x,
// nonzero = keep) the masked entries output exactly 0 and receive no gradient;
// every softmax slice must keep at least one entry.
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor softmax(const Tensor& x, std::size_t axis, std::span<const std::uint8_t> keep);
// log of the softmax above. Masked entries are reported as 0 (not -inf) so
// that q * (log q - log p) terms vanish there.
Tensor log_softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis, std::span<const std::uint8_t> keep);

// First d components along the last axis.
Tensor slice_prefix(const Tensor& x, std::size_t d);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// 1-D u, v -> scalar; 2-D [m x d] u, v -> [m] row-wise. Zero-norm input is an error.
Tensor cosine_similarity(const Tensor& u, const Tensor& v);
// Rows scaled to unit L2 norm. Zero-norm rows are an error.
Tensor l2_normalize_rows(const Tensor& x);
// out[i, j] = cos(a_i, b_j)
Tensor cosine_matrix(const Tensor& a, const Tensor& b);

// Row gather from a 2-D tensor; backward scatter-adds (also serves as the
// embedding lookup).
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
// out[i] = x[i, cols[i]]
Tensor take_per_row(const Tensor& x, std::span<const std::size_t> cols);

// Multi-head scaled dot-product attention over a padded batch.
// q, k, v: [batch*seq_len x hidden]; lengths[b] valid tokens of sequence b.
// Keys at or beyond lengths[b] are excluded from every query's softmax.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq_len,
                 std::span<const std::size_t> lengths, std::size_t num_heads);

}  // namespace mse2d::ops
