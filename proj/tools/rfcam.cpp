#include "rfcam/pipeline.hpp"

int main(int argc, char** argv) { return rfcam::cli_main(argc, argv); }
