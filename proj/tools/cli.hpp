#pragma once

#include <string>
#include <vector>

namespace msti::cli {

inline constexpr const char* kFormatVersion = "1";

/// Runs one command line (argv[0] is the program name). Returns the process exit code.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace msti::cli
