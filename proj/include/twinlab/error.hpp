#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace twinlab {

// Base of every error the library raises. Callers that only care about
// "something in twinlab failed" can catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// textcore
class EmptySentence : public Error {
 public:
  EmptySentence() : Error("sentence is empty after tokenization") {}
};

class PartitionEmpty : public Error {
 public:
  using Error::Error;
};

class InvalidCount : public Error {
 public:
  using Error::Error;
};

// metrics
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

// autodiff
class ShapeError : public Error {
 public:
  using Error::Error;
};

class RankError : public Error {
 public:
  using Error::Error;
};

class DoubleBackwardUnsupported : public Error {
 public:
  explicit DoubleBackwardUnsupported(const std::string& op)
      : Error("double backward is not supported through op '" + op + "'") {}
};

// twinnet
class VocabError : public Error {
 public:
  using Error::Error;
};

// adversary
class EmptyBatch : public Error {
 public:
  EmptyBatch() : Error("empty latent batch") {}
  explicit EmptyBatch(const std::string& what) : Error(what) {}
};

// trainer
class DivergedError : public Error {
 public:
  explicit DivergedError(std::int64_t step, const std::string& what = "loss is not finite")
      : Error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

// Malformed configuration, checkpoint or input file.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Checkpoint whose recorded hashes do not match its contents.
class CheckpointError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace twinlab
