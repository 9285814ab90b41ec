#include "maskvid/cli.hpp"

int main(int argc, char** argv) { return maskvid::run_cli(argc, argv); }
