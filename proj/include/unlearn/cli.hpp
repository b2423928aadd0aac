#pragma once

#include <string>
#include <vector>

#include "unlearn/config.hpp"

namespace unlearn::cli {

// Entry point behind the binary; returns the process exit code.
// 0 ok, 2 usage, 3 config, 4 io/parse, 5 training, 6 scoring, 1 internal.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);  // args without argv[0]

}  // namespace unlearn::cli
