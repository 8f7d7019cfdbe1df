#pragma once

#include <string>
#include <vector>

namespace ums::cli {

// Entry point behind the `ums` binary. args excludes the program name.
// Exit codes: 0 success, 2 usage/input error, 3 runtime failure.
int run(const std::vector<std::string>& args);

}  // namespace ums::cli
