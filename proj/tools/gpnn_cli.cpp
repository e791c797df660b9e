#include <iostream>

#include "gpnn/cli.hpp"

int main(int argc, char** argv) {
  return gpnn::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
