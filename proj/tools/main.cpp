// SPDX-License-Identifier: Apache-2.0
#include "homnet/cli.hpp"

int main(int argc, char** argv) { return homnet::cli::run(argc, argv); }
