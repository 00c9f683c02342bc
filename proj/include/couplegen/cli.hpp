#pragma once

#include <string>
#include <vector>

namespace couplegen::cli {

// Runs the command-line tool in-process on `args` (argv without the program
// name) and returns the process exit code:
//   0  success
//   2  configuration or usage error
//   3  missing prerequisite (dataset on disk, checkpoint from an earlier stage)
//   4  failed verification (oracle violation, corrupt artifact, drifted output)
//   1  anything else
// All diagnostics go to stderr; structured results go to files plus a run
// manifest in the output directory.
int run(const std::vector<std::string>& args);

}  // namespace couplegen::cli
