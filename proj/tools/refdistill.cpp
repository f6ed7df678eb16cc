#include <iostream>

#include "refdistill/cli.hpp"

int main(int argc, char** argv) {
  return refdistill::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
