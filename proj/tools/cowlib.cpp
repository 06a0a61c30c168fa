#include "cowlib/cli.hpp"

int main(int argc, char** argv) { return cowlib::run_cli(argc, argv); }
