#include "dasgan/cli.hpp"

int main(int argc, char** argv) { return dasgan::cli::dispatch(argc, argv); }
