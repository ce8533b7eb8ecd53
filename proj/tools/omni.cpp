// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "omni/cli.hpp"

int main(int argc, char** argv) { return omni::cli::run(argc, argv); }
