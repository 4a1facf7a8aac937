#pragma once

#include <stdexcept>
#include <string>

namespace demaformer {

// Thrown for malformed configuration files and CLI arguments. The CLI maps
// this to exit code 2; every other exception maps to exit code 1.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {
[[noreturn]] inline void check_failed(const std::string& msg, const char* file, int line) {
    throw std::invalid_argument(std::string(file) + ":" + std::to_string(line) + ": " + msg);
}
}  // namespace detail

}  // namespace demaformer

// Precondition check, always on. Dimension mismatches and contract
// violations are programming or configuration errors, never silently ignored.
#define DMF_CHECK(cond, msg)                                              \
    do {                                                                  \
        if (!(cond)) ::demaformer::detail::check_failed((msg), __FILE__, __LINE__); \
    } while (0)
