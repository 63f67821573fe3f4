#pragma once

#include <stdexcept>
#include <string>

namespace footbots {

// Base for everything thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / dimension disagreement. Message names the offending shapes.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// API precondition violated (non-scalar loss, T > t, empty subset, ...).
class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf detected in a forward value or gradient. Names the tensor.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Persistence errors, each failure mode distinct.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

class VersionError : public IoError {
public:
    explicit VersionError(const std::string& msg) : IoError(msg) {}
};

class TruncatedError : public IoError {
public:
    explicit TruncatedError(const std::string& msg) : IoError(msg) {}
};

class FormatError : public IoError {
public:
    explicit FormatError(const std::string& msg) : IoError(msg) {}
};

// Bad input data (missing conditioning frames, positions far off pitch, ...).
class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

}  // namespace footbots
