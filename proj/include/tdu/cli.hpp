#pragma once

namespace tdu {

// Full command-line entry point; returns the process exit code
// (0 success, 1 runtime failure, 2 usage error).
int run_cli(int argc, const char* const* argv);

}  // namespace tdu
