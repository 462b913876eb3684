#include <iostream>

#include "poul/cli.hpp"

int main(int argc, char** argv) { return poul::run_cli(argc, argv, std::cout, std::cerr); }
