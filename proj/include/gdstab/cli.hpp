#pragma once

// Command-line front end. Exit codes: 0 success, 1 domain error, 2 usage
// error.

#include <iosfwd>
#include <string>
#include <vector>

namespace gdstab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomain = 1;
inline constexpr int kExitUsage = 2;

// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Levenshtein distance, used for "did you mean" hints.
std::size_t edit_distance(const std::string& a, const std::string& b);

}  // namespace gdstab::cli
