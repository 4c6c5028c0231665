#pragma once

// Command-line entry point. Exit codes: 0 success, 1 usage or validation
// error, 2 runtime failure.

namespace gfe {

int run_cli(int argc, char** argv);

}  // namespace gfe
