#pragma once

#include <stdexcept>
#include <string>

namespace fbrank {

// Exit codes of the command-line front end map 1:1 onto these categories.
enum class ErrorKind { config = 2, data = 3, numeric = 4 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }
    [[nodiscard]] int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
    ErrorKind kind_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

struct DataError : Error {
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

// Dimension mismatches between tensors, heads and weight vectors.
struct ShapeError : DataError {
    explicit ShapeError(const std::string& what) : DataError("shape error: " + what) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

// A backward pass was requested with a cache whose parameters have since changed.
struct StaleCacheError : Error {
    explicit StaleCacheError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

// Raised by the evaluation service; carries an HTTP-style status.
struct ServiceError : Error {
    ServiceError(int status, const std::string& what) : Error(ErrorKind::data, what), status(status) {}
    int status;
};

std::string shape_string(long rows, long cols);

}  // namespace fbrank
