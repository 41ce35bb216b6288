#include <iostream>
#include <vector>

#include "natstream/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return natstream::cli::run(args, std::cout, std::cerr);
}
