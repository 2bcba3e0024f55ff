#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace trajfx {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid argument values (ranges, widths, flags).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Step or element index outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Violated cross-object contract (mismatched hashes, lengths, missing classes).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A metric that is undefined for the given inputs (e.g. AUC with one class).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Feature cache produced under a different configuration.
class StaleCacheError : public Error {
 public:
  using Error::Error;
};

/// Bad or inconsistent experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage is missing a required input (checkpoint, samples, ...).
class PipelineError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value encountered. Carries whatever location is known.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what, int layer = -1)
      : Error(what), layer_(layer) {}

  int layer() const noexcept { return layer_; }
  std::optional<std::int64_t> sample_id() const noexcept { return sample_id_; }
  std::optional<int> step() const noexcept { return step_; }
  std::optional<int> epoch() const noexcept { return epoch_; }

  /// Copy of this error annotated with the sample and step that produced it.
  NumericError at_sample(std::int64_t sample_id, int t) const {
    NumericError e(std::string(what()) + " (sample " + std::to_string(sample_id) +
                       ", t=" + std::to_string(t) + ")",
                   layer_);
    e.sample_id_ = sample_id;
    e.step_ = t;
    e.epoch_ = epoch_;
    return e;
  }

  NumericError at_epoch(int epoch) const {
    NumericError e(std::string(what()) + " (epoch " + std::to_string(epoch) + ")", layer_);
    e.sample_id_ = sample_id_;
    e.step_ = step_;
    e.epoch_ = epoch;
    return e;
  }

 private:
  int layer_;
  std::optional<std::int64_t> sample_id_;
  std::optional<int> step_;
  std::optional<int> epoch_;
};

}  // namespace trajfx
