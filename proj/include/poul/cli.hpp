#pragma once

#include <iosfwd>

namespace poul {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,     // bad arguments, config or input files
  kExitRuntime = 2,   // training or evaluation failure
  kExitVerify = 3,    // a property check failed
};

// Subcommands: gen, train, predict, eval, embed, distance, verify. Output
// directories default to $POUL_OUT_DIR, then the working directory.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace poul
