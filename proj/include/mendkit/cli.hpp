#pragma once

#include <string>
#include <vector>

namespace mendkit {

// Entry point shared by the mendkit binary and in-process tests.
// `args` excludes the program name. Returns the process exit code:
// 0 success, 1 usage error, 2 data error, 3 numeric error.
int cli_main(const std::vector<std::string>& args);

} // namespace mendkit
