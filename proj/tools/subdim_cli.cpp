#include "subdim/pipeline.hpp"

int main(int argc, char** argv) { return subdim::run_command(argc, argv); }
