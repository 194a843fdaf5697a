#include "capens/cli.hpp"

int main(int argc, char** argv) { return capens::run_cli(argc, argv); }
