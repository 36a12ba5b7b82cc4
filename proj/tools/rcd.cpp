#include <iostream>

#include "rcd/cli.hpp"

int main(int argc, char** argv) { return rcd::run_cli(argc, argv, std::cout, std::cerr); }
