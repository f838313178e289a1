#pragma once

#include <stdexcept>
#include <string>

namespace twinuq {

// Violated API precondition (bad shapes, invalid arguments, broken invariants).
struct contract_error : std::invalid_argument {
    explicit contract_error(const std::string& msg) : std::invalid_argument(msg) {}
};

// Incompatible run configuration detected before any work starts.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem / serialization failures; message names the offending path.
struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace twinuq
