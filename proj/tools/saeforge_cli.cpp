#include <iostream>

#include "saeforge/cli.hpp"

int main(int argc, char** argv) {
    return saeforge::run_cli(argc, argv, std::cout, std::cerr);
}
