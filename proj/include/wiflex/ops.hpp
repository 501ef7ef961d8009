#pragma once

#include <cstddef>
#include <span>

#include "wiflex/tape.hpp"

namespace wiflex {

enum class Mode { train, eval };

// Differentiable operators. Each records its output on the inputs' tape and,
// when gradients are needed, a closure implementing its vector-Jacobian
// product. All shapes are validated; mismatches throw ValidationError.

/// y = x·W + b over the last axis of x. x: [..., d_in], W: [d_in, d_out], b: [d_out].
template <class T>
Var<T> linear(Var<T> x, Var<T> W, Var<T> b);

template <class T>
Var<T> add(Var<T> a, Var<T> b);

/// Exact erf form: x·Φ(x).
template <class T>
Var<T> gelu(Var<T> x);

/// Max-subtracted softmax along the last axis.
template <class T>
Var<T> softmax(Var<T> x);

/// Per last-axis slice normalization with biased variance, then γ, β.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps);

/// Mutable running statistics of a batch-norm layer.
template <class T>
struct RunningStats {
  Tensor<T>* mean = nullptr;
  Tensor<T>* var = nullptr;
};

/// x: [B, ch, T]. Train mode normalizes each channel over (B, T) and updates
/// the running stats as new = (1 - momentum)·old + momentum·batch. Eval mode
/// reads the running stats only.
template <class T>
Var<T> batch_norm_1d(Var<T> x, Var<T> gamma, Var<T> beta, RunningStats<T> stats, Mode mode,
                     T momentum, T eps);

/// Temporal cross-correlation. x: [B, ci, T], K: [co, ci, k], b: [co].
/// Output length T + 2·pad - k + 1.
template <class T>
Var<T> conv1d(Var<T> x, Var<T> K, Var<T> b, std::size_t pad);

/// (1, 3) cross-correlation over the time axis, frequency rows untouched.
/// x: [B, ci, F, T], K: [co, ci, 1, 3], b: [co]; time padded by one.
template <class T>
Var<T> conv2d_1x3(Var<T> x, Var<T> K, Var<T> b);

/// Scaled dot-product attention core over heads. q, k, v: [B, L, d]; the
/// model dimension is split into `heads` contiguous slices of d/heads.
/// In train mode with rate > 0 the attention weights go through inverted dropout.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, T dropout_rate, Mode mode);

/// Attention parameters: packed [d, 3d] Q|K|V projection and [d, d] output projection.
template <class T>
struct AttentionParams {
  Var<T> qkv_W, qkv_b, out_W, out_b;
};

template <class T>
Var<T> multi_head_attention(Var<T> x, const AttentionParams<T>& p, std::size_t heads,
                            T dropout_rate, Mode mode);

/// Inverted dropout. Masks are drawn from the tape's generator.
template <class T>
Var<T> dropout(Var<T> x, T rate, Mode mode);

template <class T>
Var<T> reshape(Var<T> x, Shape shape);

/// [B, C, T] -> [B, T, C]
template <class T>
Var<T> transpose_last2(Var<T> x);

/// Prepends a learnable token to every sequence: [B, L, d] + [d] -> [B, L+1, d].
template <class T>
Var<T> prepend_token(Var<T> x, Var<T> token);

/// Adds PE(t) = Σ_k p_k(t)·E_k to position t of every sequence, where
/// p(t) is the normalized mixture of Gaussians N(t; mu_k, sigma_k²).
/// sigma is clamped below at kMinSigma. x: [B, L, d], mu, sigma: [K], E: [K, d].
template <class T>
Var<T> gaussian_positional_encoding(Var<T> x, Var<T> mu, Var<T> sigma, Var<T> E);

inline constexpr double kMinSigma = 1e-3;

/// Picks one position of every sequence: [B, L, d] -> [B, d].
template <class T>
Var<T> select_position(Var<T> x, std::size_t position);

/// Mean over the batch of -log softmax(logits)[label].
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels);

template <class T>
Var<T> sum_squares(Var<T> x);

/// Pure helpers shared by ops and callers.
template <class T>
T gelu_value(T x);

/// Mixture weights p_k(t) for t = 0..L-1, row-major [L, K].
template <class T>
std::vector<T> gaussian_mixture_weights(std::span<const T> mu, std::span<const T> sigma,
                                        std::size_t length);

}  // namespace wiflex
