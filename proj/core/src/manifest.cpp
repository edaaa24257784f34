#include "dslstm/manifest.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "dslstm/error.hpp"

namespace dslstm::io {

namespace {

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path, bool check_files) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  if (!std::getline(in, line) || trim(line).empty()) {
    spdlog::warn("manifest {} is empty", path.string());
    return entries;
  }
  const auto header = split_csv(trim(line));
  const bool has_group = header.size() == 4 && header[3] == "group";
  if (header.size() < 3 || header[0] != "id" || header[1] != "path" || header[2] != "label" ||
      (header.size() == 4 && !has_group) || header.size() > 4) {
    throw ValidationError(path.string() + ":1: header must be id,path,label[,group]");
  }
  const auto base = path.parent_path();
  std::set<std::string> seen;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const auto f = split_csv(trim(line));
    if (f.size() < 3 || f.size() > 4 || (f.size() == 4 && !has_group)) {
      throw ValidationError(where + ": expected " + std::string(has_group ? "3 or 4" : "3") + " fields, got " +
                            std::to_string(f.size()));
    }
    ManifestEntry e;
    e.id = f[0];
    if (e.id.empty()) throw ValidationError(where + ": empty id");
    if (!seen.insert(e.id).second) throw ValidationError(where + ": duplicate id " + e.id);
    const auto label = parse_emotion(f[2]);
    if (!label) throw ValidationError(where + ": unknown label '" + f[2] + "' (expected happy, neutral, angry or sad)");
    e.label = *label;
    e.wav_path = std::filesystem::path(f[1]);
    if (e.wav_path.is_relative()) e.wav_path = base / e.wav_path;
    if (f.size() == 4 && !f[3].empty()) e.group = f[3];
    if (check_files && !std::filesystem::is_regular_file(e.wav_path)) {
      throw ValidationError(where + ": missing WAV file " + e.wav_path.string());
    }
    entries.push_back(std::move(e));
  }
  if (entries.empty()) spdlog::warn("manifest {} has no rows", path.string());
  return entries;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  const auto base = path.parent_path();
  out << "id,path,label,group\n";
  for (const auto& e : entries) {
    auto rel = e.wav_path.lexically_relative(base.empty() ? std::filesystem::path(".") : base);
    if (rel.empty() || rel.native().starts_with("..")) rel = e.wav_path;
    out << e.id << ',' << rel.generic_string() << ',' << to_string(e.label) << ',' << e.group.value_or("") << '\n';
  }
  if (!out) throw IoError("write failed for manifest " + path.string());
}

std::vector<dsp::Utterance> load_corpus(const std::vector<ManifestEntry>& entries) {
  std::vector<dsp::Utterance> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back({e.id, e.label, dsp::read_wav(e.wav_path)});
  return out;
}

}  // namespace dslstm::io
