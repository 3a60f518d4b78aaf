#include "fanct/cli.hpp"

int main(int argc, char** argv) { return fanct::run_cli(argc, argv); }
