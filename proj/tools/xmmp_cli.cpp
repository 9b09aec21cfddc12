#include "xmmp/runner.hpp"

int main(int argc, char** argv) { return xmmp::cli::run(argc, argv); }
