#pragma once

#include <stdexcept>
#include <string>

namespace dotfan {

// A caller broke an operation's precondition (bad dimension, label, range).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Input data on disk is missing or malformed.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A checkpoint, archive or config does not match what the caller expects.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A configuration file or value is malformed or inconsistent.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A loss term evaluated to NaN/inf; `component` names the offending term.
class LossError : public std::runtime_error {
 public:
  LossError(std::string component, const std::string& what)
      : std::runtime_error(what), component_(std::move(component)) {}
  const std::string& component() const { return component_; }

 private:
  std::string component_;
};

}  // namespace dotfan
