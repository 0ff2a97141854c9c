#pragma once

// The `pdse` command line. Exit codes: 0 success, 1 invalid input
// (arguments, configuration, data, checkpoint), 2 a failed check (gradient
// suite, non-finite training).

#include <iosfwd>

namespace pdse {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitCheckFailed = 2;

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pdse
