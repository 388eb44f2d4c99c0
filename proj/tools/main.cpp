#include "cli.hpp"

int main(int argc, char** argv) { return msti::cli::run(argc, argv); }
