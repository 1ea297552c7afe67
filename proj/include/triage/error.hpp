#pragma once

#include <stdexcept>
#include <string>

namespace triage {

/// Base error for everything the pipeline throws on a fatal condition.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a persisted artifact (feature cache, checkpoint) does not
/// match what the caller expects.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace triage
