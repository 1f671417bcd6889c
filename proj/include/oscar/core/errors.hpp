#pragma once

#include <stdexcept>
#include <string>

namespace oscar {

// Error taxonomy mapped to CLI exit codes: ConfigError/ValidationError/ShapeError -> 2,
// ArtifactError -> 3, NumericError -> 4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& m) : std::runtime_error(m) {}
};

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};

struct ArtifactError : std::runtime_error {
    explicit ArtifactError(const std::string& m) : std::runtime_error(m) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace oscar
