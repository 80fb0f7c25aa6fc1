#pragma once

#include <stdexcept>
#include <string>

namespace roadclip {

// Error taxonomy mirrored by the CLI exit codes: validation 1, numeric 2, io 3.

struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace roadclip
