#pragma once

// Command-line driver: synth, preprocess, train, eval, explain, perturb and
// report subcommands writing their artifacts, a JSON-lines log and a run
// manifest into an output directory.

#include <iostream>
#include <ostream>

namespace xmmp::cli {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2 };

int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace xmmp::cli
