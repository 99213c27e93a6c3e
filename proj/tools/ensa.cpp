#include "commands.hpp"

int main(int argc, char** argv) { return ensa::cli::run(argc, argv); }
