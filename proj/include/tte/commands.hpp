#pragma once

// Command-line front end. Exit codes are stable:
// 0 ok, 1 model failure, 2 I/O or parse error, 3 empty cohort, 4 unknown model
// tag, 5 invalid configuration or DGP spec.

#include <ostream>
#include <string>
#include <vector>

namespace tte::cli {

enum ExitCode : int {
    exit_ok = 0,
    exit_failure = 1,
    exit_io = 2,
    exit_empty_cohort = 3,
    exit_bad_model = 4,
    exit_bad_config = 5,
};

// Environment variable naming the default config file.
inline constexpr const char* config_env = "TTE_CONFIG";

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tte::cli
