#include <iostream>

#include "retroseq/cli.hpp"

int main(int argc, char** argv) { return retroseq::cli::run(argc, argv, std::cout, std::cerr); }
