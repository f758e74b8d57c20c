#pragma once

#include <stdexcept>
#include <string>

namespace spheregen {

// Precondition violated by an argument (bad index, non-integral shift, ...).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// Malformed or inconsistent input data on disk (corrupt PNG, bad manifest, ...).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// NaN / Inf appeared in a loss or parameter.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid configuration or command-line usage.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

[[noreturn]] inline void domain_fail(const std::string& what) { throw DomainError(what); }

inline void require(bool cond, const std::string& what)
{
    if (!cond) {
        throw DomainError(what);
    }
}

} // namespace spheregen
