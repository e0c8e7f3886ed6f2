#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cstn {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor dimension / layout mismatch.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

class ValueError : public Error {
public:
    explicit ValueError(const std::string& msg) : Error(msg) {}
};

/// File / stream decoding failure. byte_offset is -1 when unknown.
class ParseError : public Error {
public:
    ParseError(const std::string& msg, std::int64_t byte_offset = -1)
        : Error(byte_offset >= 0 ? msg + " (byte " + std::to_string(byte_offset) + ")" : msg),
          offset(byte_offset) {}
    std::int64_t offset;
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

} // namespace cstn
