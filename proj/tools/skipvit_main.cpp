#include <iostream>

#include "skipvit/cli/app.hpp"

int main(int argc, char** argv) {
  return skipvit::cli::run(argc, argv, std::cout, std::cerr);
}
