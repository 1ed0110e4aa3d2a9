#pragma once

#include <stdexcept>
#include <string>

namespace couplet {

// Invalid arguments or API misuse.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad or missing input data (files, records, encodings). The CLI maps it to exit code 2.
class DataError : public Error {
public:
    using Error::Error;
};

// Bad flags or configuration values. The CLI maps it to exit code 1.
class UsageError : public Error {
public:
    using Error::Error;
};

}  // namespace couplet
