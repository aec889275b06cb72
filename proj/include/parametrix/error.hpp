#pragma once

#include <stdexcept>
#include <string>

namespace parametrix {

/// Precondition violated by the caller.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A field or integrand produced a non-finite value.
class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// a = sigma sigma^T is not uniformly elliptic at some point.
class EllipticityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Q_r with r <= d is not integrable.
class DivergentProfileError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A discretisation is too coarse for the requested accuracy.
class RefinementRequired : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Requested combination is outside what the engines support (e.g. d=2 with polynomial tails).
class Unsupported : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tail tolerance not reachable within the order cap.
class TruncationFailure : public std::runtime_error {
 public:
  TruncationFailure(const std::string& what, double achieved_tail)
      : std::runtime_error(what), achieved_tail_(achieved_tail) {}
  double achieved_tail() const noexcept { return achieved_tail_; }

 private:
  double achieved_tail_;
};

}  // namespace parametrix
