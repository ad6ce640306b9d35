#pragma once

#include <stdexcept>
#include <string>

namespace retro {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Trace text could not be turned into a well-formed trajectory.
class MalformedTraceError : public Error {
public:
    using Error::Error;
};

/// A configuration value is outside its valid domain.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A file (fixture, keyword list, dataset) could not be loaded.
class LoadError : public Error {
public:
    using Error::Error;
};

/// Retryable provider failure: connection refused, timeout, 429, 5xx.
class TransientError : public Error {
public:
    using Error::Error;
};

/// Non-retryable provider failure.
class ProviderError : public Error {
public:
    using Error::Error;
};

/// The scripted provider has no entry for the requested key.
class FixtureMissError : public ProviderError {
public:
    using ProviderError::ProviderError;
};

/// An internal invariant was broken; indicates a bug, not bad input.
class InvariantViolation : public Error {
public:
    using Error::Error;
};

}  // namespace retro
