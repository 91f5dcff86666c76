#include "decred/cli.hpp"

int main(int argc, char** argv) { return decred::cli::run(argc, argv); }
