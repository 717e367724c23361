#include <iostream>
#include <string>
#include <vector>

#include "compscale/cli.hpp"

int main(int argc, char** argv) {
  return compscale::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
