#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace deshadow::cli {

// Runs one subcommand; args excludes the program name. Returns the process exit
// code: 0 success, 1 bad usage / contract / config / numerical failure, 2 I/O.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace deshadow::cli
