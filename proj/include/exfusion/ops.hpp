#pragma once

#include "exfusion/autograd.hpp"

#include <cstdint>
#include <type_traits>
#include <span>
#include <vector>

namespace exfusion {

// Differentiable primitives. Every op records its result on the tape of its
// first operand; all operands must share that tape.

/// Batched matrix product. a: [..., m, k], b: [..., k, n]. Batch dims must
/// match, or one side must be a plain matrix broadcast over the other's batch.
template<typename T>
Var<T> matmul(const Var<T> &a, const Var<T> &b);

/// Elementwise ops with trailing-aligned broadcasting; gradients are summed
/// over broadcast axes.
template<typename T>
Var<T> add(const Var<T> &a, const Var<T> &b);
template<typename T>
Var<T> sub(const Var<T> &a, const Var<T> &b);
template<typename T>
Var<T> mul(const Var<T> &a, const Var<T> &b);
template<typename T>
Var<T> scale(const Var<T> &a, std::type_identity_t<T> s);

/// Exact GELU, x * Phi(x).
template<typename T>
Var<T> gelu(const Var<T> &a);

/// Numerically stable softmax along `axis`.
template<typename T>
Var<T> softmax(const Var<T> &a, std::size_t axis);
/// Softmax over the last axis of [..., L, L] where row i only sees columns j <= i.
/// Masked entries are exactly zero.
template<typename T>
Var<T> causal_softmax(const Var<T> &a);

/// Normalizes over the last axis, then applies gain and bias of that width.
template<typename T>
Var<T> layernorm(const Var<T> &a, const Var<T> &gain, const Var<T> &bias, std::type_identity_t<T> eps);

/// Mean negative log-likelihood of `targets` under softmax(logits). logits: [B, C].
template<typename T>
Var<T> cross_entropy(const Var<T> &logits, std::span<const std::int32_t> targets);

template<typename T>
Var<T> sum(const Var<T> &a);
template<typename T>
Var<T> mean(const Var<T> &a);
/// Mean over one axis; that axis is removed from the result.
template<typename T>
Var<T> mean_axis(const Var<T> &a, std::size_t axis);

template<typename T>
Var<T> reshape(const Var<T> &a, Shape shape);
/// Output axis i is input axis perm[i].
template<typename T>
Var<T> permute(const Var<T> &a, const std::vector<std::size_t> &perm);

/// Rows of a 2-D table: out[r] = table[indices[r]].
template<typename T>
Var<T> gather_rows(const Var<T> &table, std::span<const std::int32_t> indices);
/// Inverse of gather_rows: out[indices[r]] += src[r], out has `rows` rows.
template<typename T>
Var<T> scatter_rows(const Var<T> &src, std::span<const std::int32_t> indices, std::size_t rows);
/// Column `col` of a 2-D tensor restricted to `rows`, shaped [rows.size(), 1].
template<typename T>
Var<T> gather_column(const Var<T> &a, std::span<const std::int32_t> rows, std::size_t col);

/// Affine map over the last axis: x W + b. x: [..., in], w: [in, out], b: [out].
template<typename T>
Var<T> linear(const Var<T> &x, const Var<T> &w, const Var<T> &b);

/// Broadcast result shape of two operands, or DimensionError.
Shape broadcast_shape(const Shape &a, const Shape &b);

} // namespace exfusion
