#pragma once

#include <string>
#include <vector>

namespace xattn::cli {

// Exit codes shared by every subcommand.
inline constexpr int kOk = 0;
inline constexpr int kConfigError = 2;
inline constexpr int kNumericError = 3;
inline constexpr int kIoError = 4;

// Runs one CLI invocation ("train", "eval", "usage", "prune", "count",
// "bench", "gradcheck", "ablate", "data") and returns its exit code. Kept
// callable in-process so tests can drive the exact production code path.
int run(const std::vector<std::string>& args);

}  // namespace xattn::cli
