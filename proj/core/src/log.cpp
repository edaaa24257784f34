#include "dslstm/log.hpp"

#include <cstdlib>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>

namespace dslstm {

void init_logging() {
  auto logger = spdlog::get("dslstm");
  if (!logger) logger = spdlog::stderr_color_mt("dslstm");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  const char* env = std::getenv("DSLSTM_LOG");
  const auto level = env ? spdlog::level::from_str(env) : spdlog::level::info;
  spdlog::set_level(level);
}

}  // namespace dslstm
