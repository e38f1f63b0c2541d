#include "tdu/cli.hpp"

int main(int argc, char** argv) { return tdu::run_cli(argc, argv); }
