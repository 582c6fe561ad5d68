#include <condmv/app.hpp>

int main(int argc, char** argv) { return condmv::app::main(argc, argv); }
