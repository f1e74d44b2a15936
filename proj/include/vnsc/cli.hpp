#ifndef VNSC_CLI_HPP
#define VNSC_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

namespace vnsc {

enum ExitCode : int {
    exit_ok = 0,
    exit_internal = 1,
    exit_usage = 2,
    exit_format = 3,
    exit_numerical = 4,
};

/// Runs `vnsc <encode|decode|train|eval> ...`; args exclude the program name.
/// Results go to `out` as key=value lines, diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace vnsc

#endif // VNSC_CLI_HPP
