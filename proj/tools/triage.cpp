#include <iostream>

#include "triage/cli.hpp"

int main(int argc, char** argv) { return triage::cli::main(argc, argv, std::cout, std::cerr); }
