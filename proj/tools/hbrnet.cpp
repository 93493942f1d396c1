#include <iostream>

#include "hbrnet/cli.hpp"

int main(int argc, char** argv) { return hbrnet::cli::main(argc, argv, std::cout, std::cerr); }
