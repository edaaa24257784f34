#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dslstm/folds.hpp"
#include "dslstm/metrics.hpp"
#include "dslstm/model.hpp"
#include "dslstm/optim.hpp"
#include "dslstm/preprocess.hpp"

namespace dslstm::train {

using Records = std::vector<dsp::FeatureRecord>;

struct TrainConfig {
  model::ModelConfig model;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  std::size_t patience = 8;
  double holdout = 0.1;
  AdamOptions adam;
  double clip_norm = 5.0;
  std::size_t folds = 5;
  FoldStrategy strategy = FoldStrategy::kStratifiedRandom;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;

  void validate() const;
};

/// Stacks the selected records. Spectrograms must share one shape.
model::Batch<float> make_batch(const Records& records, std::span<const std::size_t> indices, bool with_labels = true);

/// Consecutive chunks of `batch_size`; a trailing chunk of one item is merged
/// into its predecessor because batch statistics need two rows.
std::vector<std::vector<std::size_t>> chunk(std::span<const std::size_t> order, std::size_t batch_size);

/// One optimizer step on `batch`; returns the loss before the update.
double train_step(model::Model<float>& m, Adam<float>& adam, const model::Batch<float>& batch, double clip_norm);

/// Eval-mode loss averaged over items.
double mean_loss(model::Model<float>& m, const Records& records, std::span<const std::size_t> indices,
                 std::size_t batch_size);

EvalResult evaluate(model::Model<float>& m, const Records& records, std::span<const std::size_t> indices,
                    std::size_t batch_size = 32);

struct FitHistory {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;  // 1-based; 0 when no holdout was used
};

/// Trains on `train` with a stratified holdout for early stopping and
/// restores the weights of the best validation epoch.
FitHistory fit(model::Model<float>& m, const Records& records, std::span<const std::size_t> train,
               const TrainConfig& cfg, std::uint64_t seed);

struct RunOutput {
  MetricsReport report;
  std::vector<std::filesystem::path> checkpoints;
};

/// Runs every fold of `plan`. Fold f builds its model from seed + f. Folds
/// may run concurrently (cfg.jobs); results do not depend on it. A numeric
/// failure marks the report incomplete instead of throwing.
RunOutput train_run(const TrainConfig& cfg, const Records& records, const FoldPlan& plan,
                    const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt);

std::vector<std::string> record_ids(const Records& records);
std::vector<int> record_labels(const Records& records);

}  // namespace dslstm::train
