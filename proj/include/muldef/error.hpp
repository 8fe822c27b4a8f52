#pragma once

#include <stdexcept>
#include <string>

namespace muldef {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or layer shape disagreement. Carries the offending layer when known.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed or truncated file payload (model, adversarial set, IDX, CIFAR).
class FormatError : public Error {
public:
    using Error::Error;
};

/// NaN or Inf produced inside a computation.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Caller passed a value outside the documented domain.
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// Configuration validation failure; `line` is 1-based, 0 when unknown.
class ConfigError : public Error {
public:
    ConfigError(const std::string& field, const std::string& message, int line = 0)
        : Error(format(field, message, line)), field_(field), line_(line) {}

    const std::string& field() const noexcept { return field_; }
    int line() const noexcept { return line_; }

private:
    static std::string format(const std::string& field, const std::string& message, int line) {
        std::string out = "config";
        if (line > 0) out += ":" + std::to_string(line);
        out += ": " + field + ": " + message;
        return out;
    }

    std::string field_;
    int line_;
};

}  // namespace muldef
