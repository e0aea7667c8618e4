#pragma once

#include <stdexcept>
#include <string>

namespace attncache {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class InputError : public Error {
public:
    using Error::Error;
};

// Attention cache does not fit the input it is applied to.
class CacheError : public Error {
public:
    using Error::Error;
};

// Corrupt, truncated, or foreign file.
class FormatError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

class TrainingError : public Error {
public:
    using Error::Error;
};

// A metric whose value is mathematically undefined for the given inputs.
class MetricError : public Error {
public:
    using Error::Error;
};

}  // namespace attncache
