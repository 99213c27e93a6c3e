#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ensa::cli {

// Exit codes: 0 success, 1 runtime failure, 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

// grad_check and brute-force oracle checks; prints one line per check.
bool selftest(std::ostream& out);

}  // namespace ensa::cli
