#pragma once

#include <string>
#include <vector>

namespace treelm {

// Subcommand dispatch; returns the process exit code (0 ok, 1 runtime error,
// 2 usage error).
int run_cli(const std::vector<std::string>& args);

}  // namespace treelm
