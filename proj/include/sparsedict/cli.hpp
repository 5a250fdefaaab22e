#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace sparsedict::cli {

// Runs one command. `args` excludes the program name. Returns the process
// exit code: 0 on success, 2 on usage errors, 1 on runtime errors.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Lowercase hex SHA-256 of a file's contents.
std::string sha256_file(const std::filesystem::path& path);

}  // namespace sparsedict::cli
