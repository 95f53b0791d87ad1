#include "metasr/cli.hpp"

int main(int argc, char** argv) { return metasr::cli::run(argc, argv); }
