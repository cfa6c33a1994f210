#include <iostream>

#include "e2i/harness.hpp"

int main(int argc, char** argv) {
    return e2i::run_cli(argc, argv, std::cout, std::cerr);
}
