#pragma once

#include <stdexcept>
#include <string>

namespace motionforge {

// Failure categories. The CLI maps them onto process exit codes:
// invalid_input/shape/bounds/format -> 2, io -> 3, state -> 4.
enum class ErrorKind {
    invalid_input,
    bounds,
    shape,
    format,
    io,
    state,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) {
        fail(kind, what);
    }
}

}  // namespace motionforge
