#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace kalign {

inline constexpr const char* kVersion = "0.1.0";

/// Exit codes: 0 ok, 1 verify gate failed, 2 usage/config, 3 data, 4 numerical.
/// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace kalign
