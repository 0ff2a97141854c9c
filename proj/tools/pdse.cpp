#include <iostream>

#include "pdse/cli.hpp"

int main(int argc, char** argv) { return pdse::run_cli(argc, argv, std::cout, std::cerr); }
