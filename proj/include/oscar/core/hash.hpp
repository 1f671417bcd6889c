#pragma once

#include <string>
#include <vector>

namespace oscar {

std::string sha256_hex(const unsigned char* data, std::size_t len);
std::string sha256_hex(const std::vector<unsigned char>& bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const std::string& path);  // throws ArtifactError if unreadable

}  // namespace oscar
