// Copyright 2026 the fedsplit authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace fedsplit {

using Matrix = Eigen::MatrixXd;
using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(const std::string& msg, std::size_t line)
      : Error(msg + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Empty or degenerate datasets, infeasible splits, too-few-users partitions.
class DataError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf divergence, SVD failures, undefined metrics.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Client/server message shape or sequencing violations.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// File and container I/O failures.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Ratings live on a 1-5 star scale; predictions are clamped to it at
/// evaluation time only, never during training.
inline double clamp_rating(double x) { return std::clamp(x, 1.0, 5.0); }

}  // namespace fedsplit
