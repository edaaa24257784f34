#pragma once

#include <spdlog/spdlog.h>

namespace dslstm {

/// Applies the DSLSTM_LOG environment variable (trace|debug|info|warn|error|off)
/// to the default logger. Unset means "info". Safe to call repeatedly.
void init_logging();

}  // namespace dslstm
