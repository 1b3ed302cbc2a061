#pragma once

#include <stdexcept>
#include <string>

namespace influence {

// Caller passed something malformed: wrong dimension, label out of range,
// empty group, bad flag value.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A factorization or iterative method could not produce a usable answer.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class ConvergenceError : public NumericalError {
 public:
  ConvergenceError(const std::string& what, double final_gradient_norm)
      : NumericalError(what), final_gradient_norm_(final_gradient_norm) {}
  double final_gradient_norm() const { return final_gradient_norm_; }

 private:
  double final_gradient_norm_;
};

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, int epoch)
      : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

}  // namespace influence
