#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pgap {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor / model contract violations.
class DimensionError : public Error { using Error::Error; };
class EmptyInputError : public Error { using Error::Error; };
class DegenerateError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class InputError : public Error { using Error::Error; };

// Data and configuration problems. The CLI maps these to exit code 2.
class DataError : public Error { using Error::Error; };
class LoadError : public DataError { using DataError::DataError; };
class ConsistencyError : public DataError { using DataError::DataError; };
class ValidationError : public DataError { using DataError::DataError; };
class ConfigError : public DataError { using DataError::DataError; };
class LabelError : public DataError { using DataError::DataError; };

class ParseError : public DataError {
public:
    ParseError(const std::string& what, std::uint64_t offset)
        : DataError(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

class TrainingError : public Error { using Error::Error; };

} // namespace pgap
