#pragma once

#include <stdexcept>
#include <string>

namespace consloss {

// Argument outside the mathematical domain of a function (e.g. p_t not in (0,1)).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// Malformed data: out-of-range labels, unnormalized probabilities, missing labels.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape or topology mismatch between tensors, layers or files.
class StructuralError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite loss or gradient during training.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid experiment configuration. Carries the offending field path.
class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& field, const std::string& message)
        : std::runtime_error(field.empty() ? message : field + ": " + message), field_(field), message_(message) {}

    const std::string& field() const noexcept { return field_; }
    const std::string& message() const noexcept { return message_; }

private:
    std::string field_;
    std::string message_;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace consloss
