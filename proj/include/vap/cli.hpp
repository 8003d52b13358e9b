#pragma once

#include <string>
#include <vector>

namespace vap::cli {

/// Exit codes: 0 success, 1 invalid input or configuration (including unknown
/// flags), 2 runtime failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitRuntime = 2;

int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);  // args[0] is the program name

}  // namespace vap::cli
