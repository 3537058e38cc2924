#pragma once

#include <stdexcept>
#include <string>

namespace fet {

// Base for all errors raised by the library. The CLI maps IoError to exit
// code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class StateError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class TrainingDivergedError : public Error {
public:
    TrainingDivergedError(int epoch, const std::string& what)
        : Error("training diverged at epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
    int epoch() const { return epoch_; }

private:
    int epoch_;
};

}  // namespace fet
