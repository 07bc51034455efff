#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace lmprobe {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Dataset file problems. Messages carry "file:line:" where applicable.
class DatasetError : public Error {
public:
  using Error::Error;
};

/// Run configuration rejected. All problems are collected before failing.
class ConfigError : public Error {
public:
  explicit ConfigError(std::vector<std::string> issues)
      : Error(join(issues)), issues_(std::move(issues)) {}
  const std::vector<std::string>& issues() const { return issues_; }

private:
  static std::string join(const std::vector<std::string>& v) {
    std::string s = "invalid configuration:";
    for (const auto& e : v) {
      s += "\n  - " + e;
    }
    return s;
  }
  std::vector<std::string> issues_;
};

class GatewayError : public Error {
public:
  using Error::Error;
};

/// Requested operation not in the backend's capability set.
class CapabilityError : public GatewayError {
public:
  using GatewayError::GatewayError;
};

/// Network-level failure; retried with backoff before surfacing.
class TransportError : public GatewayError {
public:
  using GatewayError::GatewayError;
};

/// Backend answered, but the payload violates the response contract.
class MalformedResponseError : public GatewayError {
public:
  using GatewayError::GatewayError;
};

/// Mock fixture has no rule for a request (a test-authoring problem).
class FixtureError : public GatewayError {
public:
  using GatewayError::GatewayError;
};

/// Backend refused the prompt itself (e.g. overlength input). Not retried.
class PromptRejectedError : public GatewayError {
public:
  using GatewayError::GatewayError;
};

/// Token not present in the returned mask distribution.
class RankUnavailableError : public GatewayError {
public:
  RankUnavailableError(const std::string& token, int truncation_depth)
      : GatewayError("token \"" + token + "\" not within the top " +
                     std::to_string(truncation_depth) + " of the distribution"),
        truncation_depth_(truncation_depth) {}
  int truncation_depth() const { return truncation_depth_; }

private:
  int truncation_depth_;
};

/// Exemplar pool smaller than the requested shot count.
class InsufficientPoolError : public Error {
public:
  using Error::Error;
};

/// Fill-mask answer set has no single-token form; the pair must be skipped.
class EmptyAnswerError : public Error {
public:
  using Error::Error;
};

class UndefinedMetricError : public Error {
public:
  using Error::Error;
};

class UndefinedBiasError : public Error {
public:
  using Error::Error;
};

/// Runs being compared were produced from different dataset versions.
class ManifestMismatchError : public Error {
public:
  using Error::Error;
};

}  // namespace lmprobe
