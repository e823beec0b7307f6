#pragma once

#include <cstdlib>
#include <stdexcept>
#include <string>

namespace masr {

// Thrown when a computation leaves the supported numeric regime
// (NaN loss, artanh argument at/over 1, degenerate denominators).
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when an exact solver is asked for an instance above its cap.
struct UnsupportedSizeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown by file parsers; carries the 1-based line number.
struct ParseError : std::runtime_error {
    int line;
    ParseError(const std::string &msg, int line_no)
        : std::runtime_error(msg + " (line " + std::to_string(line_no) + ")"),
          line(line_no) {}
};

// Thrown when a cross-check against a brute-force oracle disagrees.
struct OracleMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void check_arg(bool ok, const char *msg) {
    if (!ok) throw std::invalid_argument(msg);
}

// Log verbosity from MASRLAB_LOG: quiet | info (default) | debug.
enum class LogLevel { Quiet = 0, Info = 1, Debug = 2 };

inline LogLevel log_level() {
    static LogLevel lvl = [] {
        const char *v = std::getenv("MASRLAB_LOG");
        if (!v) return LogLevel::Info;
        std::string s(v);
        if (s == "quiet") return LogLevel::Quiet;
        if (s == "debug") return LogLevel::Debug;
        return LogLevel::Info;
    }();
    return lvl;
}

} // namespace masr
