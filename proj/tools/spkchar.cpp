#include "spkchar/pipeline.hpp"

int main(int argc, char** argv) { return spkchar::run_command(argc, argv); }
