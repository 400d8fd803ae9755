#pragma once

#include <string>
#include <vector>

namespace halluscope {

/// Runs one command line (without the program name) and returns the exit code:
/// 0 success, 2 config error, 3 missing artifact, 4 validation failure, 1 other.
int run_cli(const std::vector<std::string>& args);

}  // namespace halluscope
