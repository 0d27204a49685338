#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace saeforge {

// Command-line entry point. Results go to `out`, progress and errors to
// `err`. Returns the process exit status: 0 on success, 1 on a runtime
// failure (including any failed sweep cell), 2 on a usage error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace saeforge
