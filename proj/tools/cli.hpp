#pragma once

// The dotfan command line: dataset generation, pretraining, joint
// training, synthesis commands, evaluation and plotting.

#include <iosfwd>
#include <string>
#include <vector>

namespace dotfan::cli {

enum ExitCode : int {
  kSuccess = 0,
  kUsageError = 1,
  kDataError = 2,
  kIncompatible = 3,  // checkpoint or configuration mismatch
};

// args[0] is the program name. Reports go to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dotfan::cli
