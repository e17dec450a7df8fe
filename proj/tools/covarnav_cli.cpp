#include "covarnav/harness.hpp"

int main(int argc, char** argv) { return covarnav::run_cli(argc, argv); }
