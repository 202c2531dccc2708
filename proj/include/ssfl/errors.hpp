#pragma once

#include <stdexcept>
#include <string>

namespace ssfl {

// Error taxonomy shared across the library. The CLI maps these onto
// process exit codes; see tools/ssfl_cli.cpp.

struct InvalidInputError : std::invalid_argument {
    explicit InvalidInputError(const std::string& what) : std::invalid_argument(what) {}
};

// Not enough samples of some class to satisfy an assignment request.
struct CapacityError : std::runtime_error {
    explicit CapacityError(const std::string& what) : std::runtime_error(what) {}
};

// A cache or plan was used against a state it was not produced from.
struct ContractViolationError : std::logic_error {
    explicit ContractViolationError(const std::string& what) : std::logic_error(what) {}
};

// 0/0 style results that have no defined value.
struct UndefinedValueError : std::runtime_error {
    explicit UndefinedValueError(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed external data (IDX magic, CSV fields, JSONL lines).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

struct TrainingDivergedError : std::runtime_error {
    explicit TrainingDivergedError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace ssfl
