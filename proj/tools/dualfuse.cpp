#include "dualfuse/cli.hpp"

int main(int argc, char** argv) { return dualfuse::cli::run_cli(argc, argv); }
