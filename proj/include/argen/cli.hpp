#pragma once

#include <string>
#include <vector>

namespace argen::cli {

// Entry point shared by the binary and the tests. Maps exceptions to the
// exit-code contract: 0 ok, 2 config, 3 integrity, 4 stage order, 5 numeric,
// 1 anything else.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace argen::cli
