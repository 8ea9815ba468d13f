#include "v3fusion/cli/app.hpp"

int main(int argc, char** argv) { return v3fusion::cli::run_app(argc, argv); }
