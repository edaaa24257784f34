#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dslstm/emotion.hpp"
#include "dslstm/preprocess.hpp"

namespace dslstm::io {

struct ManifestEntry {
  std::string id;
  std::filesystem::path wav_path;  // resolved against the manifest's directory
  Emotion label = Emotion::kNeutral;
  std::optional<std::string> group;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

/// CSV with header `id,path,label[,group]`. Errors name the 1-based line.
/// When `check_files` is set, every referenced WAV must exist.
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path, bool check_files = true);

/// Writes paths relative to the manifest's directory when possible.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

/// Reads every WAV of the manifest.
std::vector<dsp::Utterance> load_corpus(const std::vector<ManifestEntry>& entries);

}  // namespace dslstm::io
