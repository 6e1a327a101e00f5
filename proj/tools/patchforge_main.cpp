#include "patchforge/cli.hpp"

int main(int argc, char** argv) { return patchforge::run_cli(argc, argv); }
