#pragma once

#include <string_view>

namespace modelprobe::cli {

inline constexpr std::string_view kVersion = "0.1.0";

/// Exit codes: 0 success, 1 domain error (JSON error object on stderr), 2 usage error.
int run(int argc, char** argv);

}  // namespace modelprobe::cli
