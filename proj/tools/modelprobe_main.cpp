#include "modelprobe/cli.hpp"

int main(int argc, char** argv) { return modelprobe::cli::run(argc, argv); }
