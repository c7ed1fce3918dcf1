#include "cli.hpp"

int main(int argc, char** argv) { return alsim::cli::run(argc, argv); }
