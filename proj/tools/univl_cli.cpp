#include "uvl/cli.hpp"

int main(int argc, char** argv) { return uvl::run_cli(argc, argv); }
