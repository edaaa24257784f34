#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace dslstm::cli {

struct ConfigEntry {
  std::string key;  // normalized: underscores become hyphens
  std::string value;
  std::size_t line = 0;
};

/// key=value lines; blank lines and lines starting with '#' are skipped.
std::vector<ConfigEntry> read_config_file(const std::filesystem::path& path);

/// Removes `--config FILE` (or `--config=FILE`) from `args` and inserts the
/// file's entries as `--key=value` right after the subcommand, ahead of the
/// user's own flags so those take precedence. Keys rejected by `known` raise
/// a ValidationError naming the file and line.
std::vector<std::string> splice_config(std::vector<std::string> args,
                                       const std::function<bool(const std::string& key)>& known);

}  // namespace dslstm::cli
