// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace droaug {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or malformed layer composition.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value became NaN/Inf. Raised instead of propagating non-finite values.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed or corrupt file contents (IDX, CIFAR, checkpoint, manifest).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or unknown configuration keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Argument values outside an operation's domain (e.g. rows that are not distributions).
class DomainError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace droaug
