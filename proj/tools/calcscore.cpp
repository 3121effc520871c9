#include "calcscore/cli.hpp"

int main(int argc, char** argv) { return calcscore::cli::run_cli(argc, argv); }
