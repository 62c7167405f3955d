#include "amad/cli.hpp"

int main(int argc, char** argv) { return amad::run_cli(std::vector<std::string>(argv, argv + argc)); }
