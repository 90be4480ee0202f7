#pragma once

#include <memory>
#include <type_traits>
#include <vector>

#include "lmdet/tensor.hpp"

namespace lmdet::ops {

/// Record a node on `out` (inputs + backward rule) when grad recording is on
/// and at least one input requires grad. Extension point for fused ops
/// defined in other translation units (convolutions, resizes, losses).
/// T deduces from `out` only, so lambdas convert to the callback in place.
template <class T>
void attach_op(Tensor<T>& out, const char* op,
               std::type_identity_t<std::vector<Tensor<T>>> inputs,
               std::type_identity_t<std::function<void(Node<T>&)>> backward);

// ---- elementwise (equal shapes) ----
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

/// b's shape must be a suffix of a's shape; b is broadcast over the leading axes.
template <class T> Tensor<T> add_suffix(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul_suffix(const Tensor<T>& a, const Tensor<T>& b);

template <class T> Tensor<T> scale(const Tensor<T>& a, T c);

// ---- matmul ----
/// a: [batch..., m, k]. b: [k, n] (broadcast over batches) or [batch..., k, n].
/// With transpose_b, b's last two axes are [n, k] instead.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

// ---- layout ----
template <class T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <class T> Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes);
template <class T> Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b);
/// [B,H,W,C] -> [B,H/f,W/f,f*f*C]; each f x f patch flattened row-major.
template <class T> Tensor<T> space_to_depth(const Tensor<T>& a, int factor);

/// out[i,:] = table[index[i],:]. Grad scatter-adds back into rows.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, std::shared_ptr<const std::vector<int>> index);

/// Generic flat gather: out.flat[i] = x.flat[src[i]]. Backward scatter-adds,
/// so src may repeat indices. Building block for permutations and windowing.
template <class T>
Tensor<T> gather_flat(const Tensor<T>& x, std::shared_ptr<const std::vector<std::int64_t>> src,
                      Shape out_shape, const char* opname);

// ---- activations ----
template <class T> Tensor<T> relu(const Tensor<T>& a);
template <class T> Tensor<T> sigmoid(const Tensor<T>& a);
template <class T> Tensor<T> gelu(const Tensor<T>& a);
template <class T> Tensor<T> softmax_last(const Tensor<T>& a);

// ---- reductions ----
template <class T> Tensor<T> sum_all(const Tensor<T>& a);
template <class T> Tensor<T> mean_all(const Tensor<T>& a);

// ---- normalization ----
/// Per-token normalization over the last axis, then affine.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

}  // namespace lmdet::ops
