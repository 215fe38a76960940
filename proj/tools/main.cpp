#include "softcpt/cli.hpp"

int main(int argc, char** argv) { return softcpt::cli::run(argc, argv); }
