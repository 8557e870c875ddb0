// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace homnet::cli {

// Returns the process exit code: 0 ok, 1 runtime failure, 2 usage or missing input.
int run(int argc, char** argv);

}  // namespace homnet::cli
