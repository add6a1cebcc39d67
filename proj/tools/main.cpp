#include "psearch/cli.hpp"

int main(int argc, char** argv) { return psearch::cli_main(argc, argv); }
