#include <iostream>

#include "ermc/cli.hpp"

int main(int argc, char** argv) { return ermc::run_cli(argc, argv, std::cout, std::cerr); }
