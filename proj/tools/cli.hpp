#pragma once

// The `idguard` command line, callable in-process so tests can drive it.

#include <ostream>
#include <string>
#include <vector>

namespace idguard::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kRuntime = 2 };

/// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace idguard::cli
