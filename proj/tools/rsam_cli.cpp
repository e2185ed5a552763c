#include "rsam/cli.hpp"

int main(int argc, char** argv) { return rsam::cli::run(argc, argv); }
