#pragma once

#include <stdexcept>
#include <string>

namespace fal {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Smallest singular value below the relative rank tolerance.
class DegenerateMatrix : public Error {
 public:
  using Error::Error;
};

/// Gradient requested where the spectral function is not differentiable
/// (repeated singular values).
class NonSmoothPoint : public Error {
 public:
  using Error::Error;
};

class InvalidEpisode : public Error {
 public:
  using Error::Error;
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

} // namespace fal
