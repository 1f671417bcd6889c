#pragma once

#include <fstream>
#include <string>

#include "oscar/core/errors.hpp"
#include "oscar/core/io.hpp"

namespace oscar {

// Line-per-record training log; one JSON object per line.
class JsonlLogger {
  public:
    JsonlLogger() = default;
    explicit JsonlLogger(const std::string& path) { open(path); }
    void open(const std::string& path) {
        out_.open(path, std::ios::trunc);
        if (!out_) throw ArtifactError("cannot open log: " + path);
    }
    bool is_open() const { return out_.is_open(); }
    void log(const Json& j) {
        if (out_.is_open()) out_ << j.dump() << "\n" << std::flush;
    }

  private:
    std::ofstream out_;
};

}  // namespace oscar
