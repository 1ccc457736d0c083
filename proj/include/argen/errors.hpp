#pragma once

#include <stdexcept>
#include <string>

namespace argen {

// Error categories map onto the CLI exit-code contract:
// 2 config, 3 integrity, 4 stage order, 5 numeric.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IntegrityError : std::runtime_error {
    explicit IntegrityError(const std::string& msg) : std::runtime_error(msg) {}
};

struct StageOrderError : std::runtime_error {
    explicit StageOrderError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace argen
