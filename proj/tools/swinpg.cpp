#include <iostream>

#include "swinpg/cli.hpp"

int main(int argc, char** argv) { return swinpg::cli::run(argc, argv, std::cout, std::cerr); }
