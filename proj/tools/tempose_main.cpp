#include <iostream>

#include "tempose/cli.hpp"

int main(int argc, char** argv) { return tempose::cli::run(argc, argv, std::cout, std::cerr); }
