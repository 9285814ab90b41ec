#pragma once

namespace maskvid {

/// Entry point of the `maskvid` command. Returns 0 on success, 2 on usage
/// errors and 1 on runtime errors; messages go to stderr.
int run_cli(int argc, char** argv);

}  // namespace maskvid
