#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace shmamba {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An argument lies outside the mathematical domain of an operation
/// (log of a non-positive value, arctanh at the ball boundary, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A pooled feature row had zero norm, so cosine similarity is undefined.
class DegenerateFeatureError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// Two hyperbolic points living on balls of different curvature were combined.
class CurvatureMismatchError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity was produced or supplied. Never propagated silently.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public IoError {
 public:
  using IoError::IoError;
};

class VersionMismatchError : public IoError {
 public:
  using IoError::IoError;
};

class TruncatedPayloadError : public IoError {
 public:
  using IoError::IoError;
};

/// Manifest-level failure tied to one sample.
class ManifestError : public Error {
 public:
  ManifestError(std::size_t sample, const std::string& what)
      : Error("sample " + std::to_string(sample) + ": " + what), sample_(sample) {}
  std::size_t sample() const noexcept { return sample_; }

 private:
  std::size_t sample_;
};

class MissingFileError : public ManifestError {
 public:
  using ManifestError::ManifestError;
};

class SampleShapeError : public ManifestError {
 public:
  using ManifestError::ManifestError;
};

}  // namespace shmamba
