#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "dslstm/ops.hpp"
#include "dslstm/rng.hpp"

namespace dslstm::model {

using ad::Graph;
using ad::Mode;
using ad::Parameter;
using ad::RunningStats;
using ad::Tensor;
using ad::Var;

/// Where the per-time-step normalization sits in the four sigmoid gates.
enum class RbnPosition {
  kPostSigmoid,  // rbn(sigma(Wz + b)), the gate equations as written
  kPreSigmoid,   // sigma(rbn(Wz + b)), the recurrent-BN literature form
  kOff,          // identity; used by reduction tests
};

/// Eval-mode behaviour for time steps past the longest trained sequence.
enum class RbnExtrapolation { kError, kClamp };

template <typename T>
struct CellState {
  Var<T> h;
  Var<T> c;
};

/// Graph-bound weights of a standard LSTM cell. Every matrix acts on [x, h].
template <typename T>
struct LstmCellWeights {
  Var<T> w_i, w_f, w_g, w_o;
  Var<T> b_i, b_f, b_g, b_o;
};

/// i, f, o = sigma(W[x,h] + b); g = tanh(W_g[x,h] + b_g); c' = f c + i g; h' = o tanh(c').
template <typename T>
CellState<T> lstm_cell(Var<T> x, const CellState<T>& prev, const LstmCellWeights<T>& w);

/// Graph-bound weights of a dual-sequence cell.
template <typename T>
struct DsLstmCellWeights {
  Var<T> w_f, w_it, w_if, w_o;  // act on [x, y, h]
  Var<T> w_t;                   // acts on [x, h]
  Var<T> w_fr;                  // acts on [y, h]
  Var<T> b_f, b_it, b_if, b_o, b_t, b_fr;
};

/// Normalization of one gate at one time step.
template <typename T>
struct GateNorm {
  Var<T> gamma;
  Var<T> beta;
  RunningStats<T>* stats = nullptr;
};

/// Gate order: forget, time-input, frequency-input, output.
template <typename T>
using StepNorms = std::array<GateNorm<T>, 4>;

struct DsCellOptions {
  RbnPosition position = RbnPosition::kPostSigmoid;
  ad::BatchNormOptions bn;
};

/// Six-gated dual-sequence cell:
///   f, i_T, i_F, o = rbn(sigma(W[x, y, h] + b))
///   cT = tanh(W_T[x, h] + b_T),  cF = tanh(W_F[y, h] + b_F)
///   c' = f c + i_T cT + i_F cF,  h' = o tanh(c')
/// `norms` may be null only when the position is kOff.
template <typename T>
CellState<T> ds_lstm_cell(Var<T> x, Var<T> y, const CellState<T>& prev, const DsLstmCellWeights<T>& w,
                          const StepNorms<T>* norms, const DsCellOptions& opts);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; the stream depends on the name.
template <typename T>
Parameter<T> uniform_param(std::string name, ad::Shape shape, std::size_t fan_in, const Rng& rng);
template <typename T>
Parameter<T> constant_param(std::string name, ad::Shape shape, T value);

template <typename T>
class LstmLayer {
 public:
  LstmLayer(const std::string& prefix, std::size_t input_dim, std::size_t hidden, const Rng& rng);

  LstmCellWeights<T> bind(Graph<T>& g);
  std::vector<Parameter<T>*> parameters();

  std::size_t input_dim() const { return input_dim_; }
  std::size_t hidden() const { return hidden_; }

  Parameter<T> w_i, w_f, w_g, w_o;
  Parameter<T> b_i, b_f, b_g, b_o;

 private:
  std::size_t input_dim_;
  std::size_t hidden_;
};

/// Batch normalization with one running-statistics slot per time step and a
/// single learned gamma/beta shared across steps.
template <typename T>
class RecurrentBatchNorm {
 public:
  RecurrentBatchNorm(const std::string& prefix, std::size_t features, T gamma_init);

  /// Train mode grows the slot list on demand; eval mode requires the slot
  /// to exist unless extrapolation is kClamp.
  RunningStats<T>& slot(std::size_t t, Mode mode, RbnExtrapolation extrapolation);

  std::size_t features() const { return features_; }

  Parameter<T> gamma;
  Parameter<T> beta;
  std::vector<RunningStats<T>> slots;

 private:
  std::size_t features_;
};

/// Plain batch normalization layer (one statistics slot).
template <typename T>
struct BatchNormLayer {
  BatchNormLayer(const std::string& prefix, std::size_t features, T gamma_init);

  Parameter<T> gamma;
  Parameter<T> beta;
  RunningStats<T> stats;
};

template <typename T>
class DsLstmLayer {
 public:
  static constexpr std::array<const char*, 4> kGateNames{"f", "iT", "iF", "o"};

  DsLstmLayer(const std::string& prefix, std::size_t x_dim, std::size_t y_dim, std::size_t hidden, T rbn_gamma,
              const Rng& rng);

  DsLstmCellWeights<T> bind(Graph<T>& g);
  std::vector<Parameter<T>*> parameters();

  /// Runs the cell over aligned steps from a zero state and returns every h_t.
  /// Matches chaining ds_lstm_cell with slot-t statistics at step t; the
  /// input products of all steps are computed in one pass.
  std::vector<Var<T>> unroll(Graph<T>& g, const std::vector<Var<T>>& xs, const std::vector<Var<T>>& ys, Mode mode,
                             const DsCellOptions& opts, RbnExtrapolation extrapolation);

  std::size_t x_dim() const { return x_dim_; }
  std::size_t y_dim() const { return y_dim_; }
  std::size_t hidden() const { return hidden_; }

  Parameter<T> w_f, w_it, w_if, w_o, w_t, w_fr;
  Parameter<T> b_f, b_it, b_if, b_o, b_t, b_fr;
  std::array<RecurrentBatchNorm<T>, 4> rbn;
  BatchNormLayer<T> out_bn;

 private:
  std::size_t x_dim_;
  std::size_t y_dim_;
  std::size_t hidden_;
};

/// conv(4x4) -> maxpool(2x2) -> conv(4x4) -> maxpool(2x2), no padding.
template <typename T>
class CnnBlock {
 public:
  static constexpr std::size_t kKernel = 4;

  CnnBlock(const std::string& prefix, std::size_t channels1, std::size_t channels2, const Rng& rng);

  /// Spatial size after one conv+pool stage.
  static std::size_t stage(std::size_t n) { return n < kKernel ? 0 : (n - kKernel + 1) / 2; }
  static std::size_t output_size(std::size_t n) { return stage(stage(n)); }
  /// Smallest input extent that survives both stages.
  static std::size_t min_input();

  std::size_t feature_dim(std::size_t mel_rows) const { return channels2_ * output_size(mel_rows); }

  /// x: [B x 1 x F x T] -> [(T' * B) x (channels2 * F')] in time-major row order.
  Var<T> forward(Graph<T>& g, Var<T> x);
  std::vector<Parameter<T>*> parameters();

  Parameter<T> kernel1, bias1, kernel2, bias2;

 private:
  std::size_t channels2_;
};

/// Single affine classification layer.
template <typename T>
struct Classifier {
  Classifier(const std::string& prefix, std::size_t in, std::size_t classes, const Rng& rng);

  Var<T> forward(Graph<T>& g, Var<T> x);
  std::vector<Parameter<T>*> parameters() { return {&weight, &bias}; }

  Parameter<T> weight;
  Parameter<T> bias;
};

/// Splits [(T * B) x F] rows into T steps of [B x F].
template <typename T>
std::vector<Var<T>> split_time(Var<T> rows, std::size_t batch);

/// Averages adjacent steps of `xs` (an odd leftover step is kept), then
/// truncates both sequences to min(ceil(T1/2), T2).
template <typename T>
std::pair<std::vector<Var<T>>, std::vector<Var<T>>> align_time(const std::vector<Var<T>>& xs,
                                                               const std::vector<Var<T>>& ys);

/// Runs stacked LSTM layers over `steps`. Step t may have fewer rows than
/// step t-1 (packed, length-sorted batch); rows of a finished sequence drop
/// off the bottom. Returns the top layer's outputs.
template <typename T>
std::vector<Var<T>> run_lstm_stack(Graph<T>& g, std::vector<LstmLayer<T>>& layers, std::vector<Var<T>> steps);

}  // namespace dslstm::model
