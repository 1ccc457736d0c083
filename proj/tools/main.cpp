#include "argen/cli.hpp"

int main(int argc, char** argv) { return argen::cli::run_cli(argc, argv); }
