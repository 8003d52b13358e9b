#include "vap/cli.hpp"

int main(int argc, char** argv) { return vap::cli::run(argc, argv); }
