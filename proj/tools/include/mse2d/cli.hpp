#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mse2d::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

inline constexpr int kManifestFormatVersion = 1;

// Runs one subcommand. `args` excludes the program name. Never throws; every
// outcome maps to kExitOk, kExitFailure or kExitUsage.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mse2d::cli
