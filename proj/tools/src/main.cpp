#include "metricforge/cli.hpp"

int main(int argc, char** argv) { return metricforge::cli::run(argc, argv); }
