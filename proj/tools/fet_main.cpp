#include "fet/cli.hpp"

int main(int argc, char** argv) { return fet::cli::run(argc, argv); }
