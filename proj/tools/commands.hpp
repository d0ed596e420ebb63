#pragma once

namespace freesim::cli {

// Parses argv, runs one subcommand and returns the process exit code:
// 0 success, 1 domain error, 2 usage error.
int run(int argc, char** argv);

}  // namespace freesim::cli
