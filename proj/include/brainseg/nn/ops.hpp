#pragma once

// Differentiable operations. Every op validates shapes eagerly and throws
// ValidationError naming the offending dimensions.

#include <cstdint>
#include <span>
#include <vector>

#include "brainseg/nn/autograd.hpp"

namespace brainseg::nn {

enum class ResampleMode { kMaxPool2x2, kNearestUpsample2x };
enum class Activation { kRelu, kSigmoid, kSoftmaxRows };

/// Cross-correlation. `input` is [C_in,H,W] or [N,C_in,H,W]; `weight` is
/// [C_out,C_in,k,k] with odd k; `bias` is [C_out] or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, int stride, int padding);

/// Pooling/upsampling over the last two axes of a rank-3 or rank-4 tensor.
template <typename T>
Var<T> resample2d(const Var<T>& input, ResampleMode mode);

/// [N,D] x [D,K] + [K].
template <typename T>
Var<T> dense(const Var<T>& input, const Var<T>& weight, const Var<T>& bias);

template <typename T>
Var<T> activation(const Var<T>& input, Activation mode);

template <typename T>
Var<T> relu(const Var<T>& x) { return activation(x, Activation::kRelu); }
template <typename T>
Var<T> sigmoid(const Var<T>& x) { return activation(x, Activation::kSigmoid); }
template <typename T>
Var<T> softmax_rows(const Var<T>& x) { return activation(x, Activation::kSoftmaxRows); }

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& a, double factor);

/// Sum of all elements, shape [1]. Accumulates in double.
template <typename T>
Var<T> sum(const Var<T>& a);

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape);

/// out[i] = a[indices[i]], reshaped to `shape`; gradient scatter-adds.
template <typename T>
Var<T> gather(const Var<T>& a, std::vector<std::int64_t> indices, Shape shape);

/// Concatenation along axis 0 (all trailing extents equal).
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts);

/// [G*A, H, W] -> [H*W*A, G]: the per-location channel groups of a
/// prediction map laid out in anchor order (row-major cells, A per cell).
template <typename T>
Var<T> anchor_rows(const Var<T>& map, int group);

/// Per-channel y = x*scale + shift over axis 0 (rank 3) or axis 1 (rank 4)
/// with constant, non-trainable coefficients.
template <typename T>
Var<T> frozen_affine(const Var<T>& x, const Tensor<T>& scale, const Tensor<T>& shift);

// ---- losses (scalar outputs of shape [1]) --------------------------------

/// -sum_i log p[i, labels[i]] / normalizer over rows of a probability matrix.
/// Probabilities are clamped below at 1e-12 inside the log.
template <typename T>
Var<T> cross_entropy(const Var<T>& probs, std::span<const int> labels, double normalizer);

/// Smooth-L1 (|x|<1: 0.5x^2, else |x|-0.5) summed over all elements / normalizer.
template <typename T>
Var<T> smooth_l1(const Var<T>& pred, const Tensor<T>& target, double normalizer);

/// Mean per-element binary cross-entropy of probabilities against targets.
template <typename T>
Var<T> binary_cross_entropy(const Var<T>& probs, const Tensor<T>& target);

}  // namespace brainseg::nn
