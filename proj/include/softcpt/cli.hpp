#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "softcpt/errors.hpp"

namespace softcpt::cli {

// Exit statuses of `softcpt`.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

int exit_code_for(ErrorCode code) noexcept;

/// Reads a flat `key = value` file ('#' starts a comment) and returns the
/// equivalent `--key value` arguments.
std::vector<std::string> config_file_args(const std::string& path);

/// Runs one command. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace softcpt::cli
