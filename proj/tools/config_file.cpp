#include "config_file.hpp"

#include <algorithm>
#include <fstream>

#include "dslstm/error.hpp"

namespace dslstm::cli {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  return s.substr(first, s.find_last_not_of(" \t\r") - first + 1);
}

}  // namespace

std::vector<ConfigEntry> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path.string());
  std::vector<ConfigEntry> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(path.string() + ":" + std::to_string(n) + ": expected key=value");
    }
    ConfigEntry e{trim(t.substr(0, eq)), trim(t.substr(eq + 1)), n};
    std::replace(e.key.begin(), e.key.end(), '_', '-');
    if (e.key.empty()) throw ValidationError(path.string() + ":" + std::to_string(n) + ": empty key");
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<std::string> splice_config(std::vector<std::string> args,
                                       const std::function<bool(const std::string& key)>& known) {
  std::string file;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw ValidationError("--config needs a file argument");
      file = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + 2));
      break;
    }
    if (args[i].starts_with("--config=")) {
      file = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (file.empty()) return args;
  const auto sub = std::find_if(args.begin() + 1, args.end(), [](const std::string& a) { return !a.starts_with("-"); });
  if (sub == args.end()) throw ValidationError("--config must follow a subcommand");
  std::vector<std::string> injected;
  for (const auto& e : read_config_file(file)) {
    if (e.key == "config" || !known(e.key)) {
      throw ValidationError(file + ":" + std::to_string(e.line) + ": unknown key '" + e.key + "'");
    }
    injected.push_back("--" + e.key + "=" + e.value);
  }
  args.insert(sub + 1, injected.begin(), injected.end());
  return args;
}

}  // namespace dslstm::cli
