#include <iostream>

#include "laip/cli.hpp"

int main(int argc, char** argv) { return laip::cli::run(argc, argv, std::cin, std::cout, std::cerr); }
