#include <iostream>

#include "vnsc/cli.hpp"

int main(int argc, char** argv) {
    return vnsc::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
}
