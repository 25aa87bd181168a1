#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fodpipe::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2 };

// Runs `fodpipe <args...>` (args excludes the program name). Diagnostics go to
// err, summaries and help text to out.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::vector<std::string> subcommand_names();

}  // namespace fodpipe::cli
