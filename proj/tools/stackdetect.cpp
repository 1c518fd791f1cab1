#include "stackdetect/cli.hpp"

int main(int argc, char** argv) { return stackdetect::cli::main(argc, argv); }
