#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dslstm/emotion.hpp"
#include "dslstm/layers.hpp"

namespace dslstm::model {

/// The six baselines plus the two proposed models.
enum class Variant { kBase1, kBase2, kBase3, kBase4, kBase5, kBase6, kDsOnly, kDualLevel };

inline constexpr std::array<Variant, 8> kAllVariants{Variant::kBase1, Variant::kBase2,  Variant::kBase3,
                                                     Variant::kBase4, Variant::kBase5,  Variant::kBase6,
                                                     Variant::kDsOnly, Variant::kDualLevel};

std::string_view to_string(Variant v);
/// Accepts base1..base6, ds_only (or ds), dual.
Variant parse_variant(std::string_view s);
std::string_view to_string(RbnPosition p);
RbnPosition parse_rbn_position(std::string_view s);

struct ModelConfig {
  Variant variant = Variant::kDualLevel;
  std::size_t hidden = 200;
  std::size_t layers = 2;
  std::size_t mfcc_dim = 39;
  std::size_t s1_mels = 64;
  std::size_t s2_mels = 128;
  std::size_t conv1_channels = 64;
  std::size_t conv2_channels = 16;
  double rbn_gamma_init = 0.1;
  std::uint64_t seed = 0;
  RbnPosition rbn_position = RbnPosition::kPostSigmoid;
  RbnExtrapolation rbn_extrapolate = RbnExtrapolation::kError;
  /// Combine branch logits instead of branch probabilities.
  bool average_logits = false;

  static constexpr std::size_t kClasses = kNumClasses;

  /// One key=value per line; the format stored in checkpoints.
  std::string to_record() const;
  static ModelConfig from_record(std::string_view text);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// One training/evaluation batch. Spectrograms share a shape across the batch.
template <typename T>
struct Batch {
  std::vector<Tensor<T>> mfcc;  // per utterance [T_b x 39]
  Tensor<T> s1;                 // [B x 1 x n_mels1 x T1]
  Tensor<T> s2;                 // [B x 1 x n_mels2 x T2]
  std::vector<int> labels;      // may be empty at inference

  std::size_t size() const { return mfcc.size(); }
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

template <typename T>
class Branch {
 public:
  virtual ~Branch() = default;
  virtual std::string_view name() const = 0;
  virtual Var<T> logits(Graph<T>& g, const Batch<T>& batch, Mode mode) = 0;
  virtual std::vector<Parameter<T>*> parameters() = 0;
  virtual std::vector<NamedTensor<T>> export_buffers() const { return {}; }
  virtual void import_buffers(const std::map<std::string, Tensor<T>>&) {}
};

/// Two-layer LSTM over the MFCC sequence, mean-pooled, then a classifier.
/// Utterances keep their own lengths.
template <typename T>
class MfccLstmBranch final : public Branch<T> {
 public:
  MfccLstmBranch(const ModelConfig& cfg, const Rng& rng);
  std::string_view name() const override { return "mfcc"; }
  Var<T> logits(Graph<T>& g, const Batch<T>& batch, Mode mode) override;
  std::vector<Parameter<T>*> parameters() override;

  std::vector<LstmLayer<T>> layers;
  Classifier<T> classifier;
};

enum class Stream { kS1, kS2 };

/// CNN block on one spectrogram followed by a standard LSTM stack.
template <typename T>
class CnnLstmBranch final : public Branch<T> {
 public:
  CnnLstmBranch(const ModelConfig& cfg, Stream stream, const Rng& rng);
  std::string_view name() const override { return stream_ == Stream::kS1 ? "cnn_s1" : "cnn_s2"; }
  Var<T> logits(Graph<T>& g, const Batch<T>& batch, Mode mode) override;
  std::vector<Parameter<T>*> parameters() override;

  CnnBlock<T> cnn;
  std::vector<LstmLayer<T>> layers;
  Classifier<T> classifier;

 private:
  Stream stream_;
};

/// CNN blocks on both spectrograms, time alignment, stacked DS-LSTM layers
/// with per-step normalized gates, mean pooling, classifier.
template <typename T>
class DsLstmBranch final : public Branch<T> {
 public:
  DsLstmBranch(const ModelConfig& cfg, const Rng& rng);
  std::string_view name() const override { return "ds"; }
  Var<T> logits(Graph<T>& g, const Batch<T>& batch, Mode mode) override;
  std::vector<Parameter<T>*> parameters() override;
  std::vector<NamedTensor<T>> export_buffers() const override;
  void import_buffers(const std::map<std::string, Tensor<T>>& buffers) override;

  CnnBlock<T> cnn1;
  CnnBlock<T> cnn2;
  std::vector<DsLstmLayer<T>> layers;
  Classifier<T> classifier;

 private:
  DsCellOptions cell_options(Mode mode) const;
  RbnPosition position_;
  RbnExtrapolation extrapolate_;
};

template <typename T>
struct Combined {
  Var<T> probs;
  std::optional<Var<T>> loss;
};

/// probs = sum_k w_k softmax(logits_k) (or softmax(sum_k w_k logits_k) when
/// average_logits); loss = sum_k w_k CE(logits_k).
template <typename T>
Combined<T> combine_branches(std::span<const Var<T>> logits, std::span<const T> weights, std::span<const int> labels,
                             bool average_logits = false);

template <typename T>
struct ForwardResult {
  std::vector<Var<T>> branch_logits;
  Var<T> probs;
  std::optional<Var<T>> loss;
};

struct ParameterGroup {
  std::string name;
  std::size_t count = 0;
  std::size_t norm_count = 0;  // gamma/beta of normalization layers
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  ForwardResult<T> forward(Graph<T>& g, const Batch<T>& batch, Mode mode);

  /// Eval-mode argmax of the combined probabilities.
  std::vector<int> predict(const Batch<T>& batch);

  std::vector<Parameter<T>*> parameters();
  std::vector<NamedTensor<T>> export_buffers() const;
  void import_buffers(const std::map<std::string, Tensor<T>>& buffers);
  void zero_grad();

  std::size_t branch_count() const { return branches_.size(); }
  Branch<T>& branch(std::size_t i) { return *branches_[i]; }
  std::span<const T> branch_weights() const { return weights_; }

  /// Learnable scalars, including normalization gamma/beta.
  std::size_t parameter_count();
  /// Counts grouped by "<branch>.<layer>".
  std::vector<ParameterGroup> parameter_groups();

 private:
  ModelConfig cfg_;
  std::vector<std::unique_ptr<Branch<T>>> branches_;
  std::vector<T> weights_;
};

/// Branch names and combination weights a variant is built from.
std::vector<std::pair<std::string, double>> variant_layout(Variant v);

}  // namespace dslstm::model
