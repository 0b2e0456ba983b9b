#include "geoflow/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
  return geoflow::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
