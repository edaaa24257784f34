#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "dslstm/graph.hpp"

namespace dslstm::ad {

enum class Mode { kTrain, kEval };

// Elementwise. Operand shapes must match exactly.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> tanh(Var<T> a);

/// Fused LSTM cell update. z[n x 4H] holds the i, f, g, o pre-activations,
/// c_prev is [n x H]. Returns [n x 2H] = [h' | c'].
template <typename T> Var<T> lstm_pointwise(Var<T> z, Var<T> c_prev);
/// a[m x k] . b[k x n]
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> transpose(Var<T> a);
/// x[B x F] + bias[F], broadcast over the batch axis only.
template <typename T> Var<T> add_bias(Var<T> x, Var<T> bias);
/// x[B x D] . W[H x D]^T + b[H]; fused matmul/bias-add.
template <typename T> Var<T> linear(Var<T> x, Var<T> weight, std::optional<Var<T>> bias);

template <typename T> Var<T> concat(std::span<const Var<T>> parts, std::size_t axis);
template <typename T> Var<T> concat(std::initializer_list<Var<T>> parts, std::size_t axis) {
  return concat<T>(std::span<const Var<T>>(parts.begin(), parts.size()), axis);
}
/// Half-open range [begin, end) along `axis`.
template <typename T> Var<T> slice(Var<T> x, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T> Var<T> reshape(Var<T> x, Shape shape);
/// Row i of the result is row indices[i] of x (2-d).
template <typename T> Var<T> gather_rows(Var<T> x, std::vector<std::size_t> indices);
/// Appends zero rows so the result has `rows` rows (2-d).
template <typename T> Var<T> pad_rows(Var<T> x, std::size_t rows);
/// Multiplies row i by the constant factors[i] (2-d).
template <typename T> Var<T> scale_rows(Var<T> x, std::vector<T> factors);

/// Valid cross-correlation, stride 1. x[B x C x H x W], kernel[O x C x KH x KW], bias[O].
template <typename T> Var<T> conv2d(Var<T> x, Var<T> kernel, std::optional<Var<T>> bias = std::nullopt);
/// 2x2 window, stride 2; odd trailing row/column dropped; ties go to the first element in scan order.
template <typename T> Var<T> maxpool2d(Var<T> x);
/// [B x C x F x T] -> [(T*B) x (C*F)]: row t*B + b holds the channel-major feature column t of item b.
template <typename T> Var<T> time_major_rows(Var<T> x);

struct BatchNormOptions {
  Mode mode = Mode::kTrain;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Batch normalization over the rows of x[N x F]. Train mode normalizes with
/// batch statistics and updates `stats`; eval mode uses `stats` read-only.
template <typename T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, RunningStats<T>& stats, const BatchNormOptions& opts);

template <typename T> Var<T> sum(Var<T> x);
/// Mean over one axis; the axis is removed from the shape.
template <typename T> Var<T> mean_over_axis(Var<T> x, std::size_t axis);
/// Row-wise softmax of x[B x C], max-subtracted.
template <typename T> Var<T> softmax(Var<T> x);
/// Mean over the batch of -log softmax(logits)[label].
template <typename T> Var<T> cross_entropy(Var<T> logits, std::span<const int> labels);

}  // namespace dslstm::ad
