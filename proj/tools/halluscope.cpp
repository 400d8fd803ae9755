#include "halluscope/cli.hpp"

int main(int argc, char** argv) {
  return halluscope::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
