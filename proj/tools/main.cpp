#include "cli.hpp"

int main(int argc, char** argv) { return moonbeam::cli::run(argc, argv); }
