#include "unlearn/cli.hpp"

int main(int argc, char** argv) { return unlearn::cli::run_cli(argc, argv); }
