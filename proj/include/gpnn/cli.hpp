#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gpnn {

/// Exit statuses of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumeric = 4,
};

/// Parses `args` (without the program name) and runs one subcommand.
/// Failures print a single `error[<category>]: <message>` line to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Hex SHA-256 of a file's bytes.
std::string file_sha256(const std::string& path);

}  // namespace gpnn
