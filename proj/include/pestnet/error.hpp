/*
 * Copyright 2026 The pestnet Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pestnet {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes disagree. Carries both shapes for callers that report them.
class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : Error(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b)), lhs(a), rhs(b) {}
  ShapeError(const std::string& op, const std::string& what) : Error(op + ": " + what) {}

  Shape lhs;
  Shape rhs;
};

/// Input outside an op's mathematical domain (log of non-positive, division by zero).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters or layer configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API used outside its contract (backward on a non-scalar, missing head, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed file. `offset` is the byte offset (binary) or 1-based line (text).
class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t offset, const std::string& what)
      : Error(source + " @" + std::to_string(offset) + ": " + what), source(source), offset(offset) {}

  std::string source;
  std::size_t offset;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace pestnet
