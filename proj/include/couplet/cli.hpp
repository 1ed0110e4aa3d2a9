#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace couplet {

// Entry point of the `couplet` executable. `args` excludes the program name.
// Returns 0 on success, 1 on usage errors and 2 on data errors.
int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace couplet
