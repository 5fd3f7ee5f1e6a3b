// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace synhat::cli {

/// Exit status for configuration errors (bad keys, Int not dividing D, missing inputs).
inline constexpr int kConfigExit = 2;

/// Runs one command line; args[0] is the program name. Returns the exit status.
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

/// Directory searched for relative corpus paths that do not exist as given:
/// $SYNHAT_CACHE_DIR, else $XDG_CACHE_HOME/synhat, else ~/.cache/synhat.
std::string cache_dir();

}  // namespace synhat::cli
