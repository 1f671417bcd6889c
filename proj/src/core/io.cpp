#include "oscar/core/io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "oscar/core/errors.hpp"

namespace fs = std::filesystem;

namespace oscar {

std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ArtifactError("cannot read file: " + path);
    f.seekg(0, std::ios::end);
    auto size = f.tellg();
    f.seekg(0, std::ios::beg);
    std::vector<unsigned char> bytes(static_cast<std::size_t>(size));
    if (size > 0 && !f.read(reinterpret_cast<char*>(bytes.data()), size))
        throw ArtifactError("short read: " + path);
    return bytes;
}

std::string read_file_text(const std::string& path) {
    auto bytes = read_file_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

void atomic_write_bytes(const std::string& path, const unsigned char* data,
                        std::size_t len) {
    fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw ArtifactError("cannot open for writing: " + tmp);
        if (len > 0) f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(len));
        if (!f) throw ArtifactError("write failed: " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw ArtifactError("rename failed for " + path + ": " + ec.message());
}

void atomic_write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    atomic_write_bytes(path, bytes.data(), bytes.size());
}

void atomic_write_text(const std::string& path, const std::string& text) {
    atomic_write_bytes(path, reinterpret_cast<const unsigned char*>(text.data()),
                       text.size());
}

Json read_json(const std::string& path) {
    try {
        return Json::parse(read_file_text(path));
    } catch (const Json::parse_error& e) {
        throw ArtifactError("invalid JSON in " + path + ": " + e.what());
    }
}

void write_json(const std::string& path, const Json& j) {
    atomic_write_text(path, j.dump(2) + "\n");
}

void ensure_dir(const std::string& path) { fs::create_directories(path); }

bool file_exists(const std::string& path) { return fs::exists(path); }

}  // namespace oscar
