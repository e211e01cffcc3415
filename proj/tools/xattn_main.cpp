#include <vector>
#include <string>

#include "xattn/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return xattn::cli::run(args);
}
