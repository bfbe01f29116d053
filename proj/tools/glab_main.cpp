#include "glab/cli.hpp"

int main(int argc, char** argv) { return glab::cli_dispatch(argc, argv); }
