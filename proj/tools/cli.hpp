#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mmdiff::cli {

enum ExitCode { kOk = 0, kConfigError = 2, kRuntimeError = 3 };

// Runs one subcommand. args excludes the program name. Results go to out,
// logs and usage to err.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mmdiff::cli
