#include "gfe/cli.hpp"

int main(int argc, char** argv) { return gfe::run_cli(argc, argv); }
