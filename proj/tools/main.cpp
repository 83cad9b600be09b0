#include <iostream>
#include <string>
#include <vector>

#include "kalign/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return kalign::run_cli(args, std::cout, std::cerr);
}
