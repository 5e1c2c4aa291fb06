#pragma once

#include <string>
#include <vector>

namespace metricforge::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// Runs `metricforge <subcommand> ...`; args exclude the program name.
// Errors are reported on stderr and mapped to an ExitCode.
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

}  // namespace metricforge::cli
