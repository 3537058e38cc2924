#pragma once

#include <string>
#include <vector>

namespace fet::cli {

// Exit codes: 0 success, 1 usage/validation/config errors, 2 I/O errors.
int run(int argc, char** argv);
int run(const std::vector<std::string>& args);  // args exclude the program name

}  // namespace fet::cli
