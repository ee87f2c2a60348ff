#pragma once

#include <iosfwd>

namespace volseq {

/// Exit codes: 0 success, 1 internal failure, 2 usage or contract error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace volseq
