// SPDX-License-Identifier: Apache-2.0
#include "synhat/cli.hpp"

int main(int argc, char** argv) { return synhat::cli::run(argc, argv); }
