#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dslstm/folds.hpp"
#include "dslstm/gradcheck.hpp"
#include "dslstm/model.hpp"
#include "dslstm/synthetic.hpp"
#include "dslstm/trainer.hpp"

namespace dslstm::cli {

namespace fs = std::filesystem;

struct SynthOptions {
  fs::path out_dir = "synth";
  io::SyntheticSpec spec;
  std::size_t groups = 5;
};

struct PreprocessOptions {
  fs::path manifest;
  fs::path out = "features.dsl";
  std::size_t jobs = 1;
};

struct TrainOptions {
  fs::path archive;
  fs::path out_dir = "run";
  fs::path manifest;  // group keys for by_group folds
  train::TrainConfig train;
};

struct EvaluateOptions {
  fs::path checkpoint;
  fs::path archive;
  std::string split = "test";
  fs::path confusion_out;  // default: next to the checkpoint
  std::size_t batch_size = 0;  // 0: the training batch size stored in the checkpoint
};

struct GradcheckOptions {
  gradcheck::Scope scope = gradcheck::Scope::kAll;
  std::size_t instances = 5;
  std::uint64_t seed = 0;
  double tolerance = gradcheck::kTolerance;
};

struct ParamsOptions {
  model::ModelConfig model;
  fs::path checkpoint;  // count checkpoint tensors instead of building the model
};

void cmd_synth(const SynthOptions& o);
void cmd_preprocess(const PreprocessOptions& o);
/// Returns false when a fold failed; the partial report is still written.
bool cmd_train(const TrainOptions& o, const std::string& resolved_config);
void cmd_evaluate(const EvaluateOptions& o);
/// Returns false when any check exceeds the tolerance.
bool cmd_gradcheck(const GradcheckOptions& o);
void cmd_params(const ParamsOptions& o);

/// Full command line entry point; returns the process exit code
/// (0 success, 1 validation error, 2 runtime or numeric failure).
int run_cli(std::vector<std::string> args);

}  // namespace dslstm::cli
