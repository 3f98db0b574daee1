// Copyright (c) 2026 The fairprompt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace fairprompt {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor dimension / shape mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument or malformed input.
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure: singular system, non-finite value, degenerate input.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked on inconsistent or incomplete state.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Text/config/CSV parse failure.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or stream failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A metric is undefined on the given records (empty group, single class).
class MetricError : public Error {
 public:
  using Error::Error;
};

}  // namespace fairprompt
