#include "muldef/cli.hpp"

int main(int argc, char** argv) { return muldef::cli::run(argc, argv); }
