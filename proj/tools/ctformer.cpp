// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctformer/cli.hpp"

int main(int argc, char** argv) { return ctformer::run_cli(argc, argv); }
