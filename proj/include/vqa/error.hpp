#pragma once

// SPDX-License-Identifier: Apache-2.0

#include <stdexcept>
#include <string>

namespace vqa {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A documented precondition of an operation was violated by the caller.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Model output could not be parsed into the expected shape.
class ParseError : public Error {
public:
    using Error::Error;
};

class TemplateError : public Error {
public:
    using Error::Error;
};

/// Transport, HTTP status, or response-body failure talking to a model backend.
class BackendError : public Error {
public:
    using Error::Error;
};

/// A scripted scenario ran out of responses under the `error` exhaustion policy.
class ScenarioExhausted : public BackendError {
public:
    using BackendError::BackendError;
};

/// A pipeline stage could not produce its output for one sample.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what)
        : Error(stage + ": " + what), stage_(std::move(stage)) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

/// Malformed input file (dataset, config, scenario, trajectory).
class FormatError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace vqa
