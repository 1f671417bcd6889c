#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace oscar {

using Json = nlohmann::json;

std::vector<unsigned char> read_file_bytes(const std::string& path);
std::string read_file_text(const std::string& path);

// All artifact writes go through write-then-rename so interrupted runs never
// leave half-written files behind.
void atomic_write_bytes(const std::string& path, const unsigned char* data,
                        std::size_t len);
void atomic_write_bytes(const std::string& path, const std::vector<unsigned char>& bytes);
void atomic_write_text(const std::string& path, const std::string& text);

Json read_json(const std::string& path);
void write_json(const std::string& path, const Json& j);  // atomic, 2-space indent

void ensure_dir(const std::string& path);
bool file_exists(const std::string& path);

}  // namespace oscar
