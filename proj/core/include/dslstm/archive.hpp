#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "dslstm/model.hpp"
#include "dslstm/preprocess.hpp"

namespace dslstm::io {

inline constexpr std::uint32_t kArchiveVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// {rank u32, dims u32..., f32 little-endian payload}.
void write_tensor(std::ostream& out, const ad::Tensor<float>& t);
ad::Tensor<float> read_tensor(std::istream& in, const std::string& context);

/// "DSL1" feature archive. Reads are all-or-nothing.
void write_features(const std::filesystem::path& path, const std::vector<dsp::FeatureRecord>& records);
std::vector<dsp::FeatureRecord> read_features(const std::filesystem::path& path);

/// Self-describing parameter file ("DSLP").
struct Checkpoint {
  model::ModelConfig config;
  /// Free-form key=value provenance (fold index, fold plan settings).
  std::map<std::string, std::string> meta;
  std::vector<model::NamedTensor<float>> params;
  std::vector<model::NamedTensor<float>> buffers;

  std::size_t parameter_count() const;
};

Checkpoint make_checkpoint(model::Model<float>& m, std::map<std::string, std::string> meta = {});
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies parameter values and buffers into `m`; names and shapes must match.
void apply_checkpoint(model::Model<float>& m, const Checkpoint& ckpt);

}  // namespace dslstm::io
