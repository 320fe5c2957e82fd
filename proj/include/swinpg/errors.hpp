#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace swinpg {

using Shape = std::vector<int64_t>;

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Operand shapes that violate an operation's contract.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A precondition on values or call order was broken.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Invalid model / run configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Unknown registry key (e.g. gradient-check op name).
class LookupError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Degraded/reference files that have no counterpart.
class PairingError : public IoError {
public:
    PairingError(const std::string& what, std::vector<std::string> orphans)
        : IoError(what), orphans_(std::move(orphans)) {}
    const std::vector<std::string>& orphans() const noexcept { return orphans_; }

private:
    std::vector<std::string> orphans_;
};

class PpmError : public IoError {
public:
    enum class Kind { bad_magic, bad_maxval, malformed_header, truncated };
    PpmError(Kind kind, const std::string& what) : IoError(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

class CheckpointError : public IoError {
public:
    enum class Kind { bad_magic, version_mismatch, truncated, dimension_overflow, malformed };
    CheckpointError(Kind kind, const std::string& what) : IoError(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

}  // namespace swinpg
