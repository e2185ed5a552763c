#pragma once

#include <string>
#include <vector>

namespace rsam::cli {

// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitRuntime = 4;

/// Parses and runs `prepare | train | eval | ablate | fewshot | predict`.
/// Never throws; errors are printed to stderr and mapped to an exit code.
int run(int argc, const char* const* argv);

/// Same, for an argument list without the program name.
int run(const std::vector<std::string>& args);

}  // namespace rsam::cli
