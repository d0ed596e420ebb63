#include "commands.hpp"

int main(int argc, char** argv) { return freesim::cli::run(argc, argv); }
