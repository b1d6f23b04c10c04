/*
 * Copyright 2026 The bevtune Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bevtune {

// Base of every typed toolkit error. CLI maps Error subtypes to exit code 1,
// except ConfigError which maps to exit code 2.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Malformed file contents. position() is the byte offset for binary formats
// and the line number for line-oriented formats; the message says which.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t position)
      : Error(what), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

class ChecksumMismatch : public Error {
 public:
  using Error::Error;
};

class UnsupportedVersion : public Error {
 public:
  using Error::Error;
};

// Scene generation could not place a box after the rejection budget.
class PlacementFailure : public Error {
 public:
  using Error::Error;
};

// A loss was requested for an assignment with nothing to score.
class EmptyMatch : public Error {
 public:
  using Error::Error;
};

// A depth-map region held no finite pixels to extract a depth from.
class NoDepth : public Error {
 public:
  using Error::Error;
};

// Exhaustive assignment enumeration refused: problem too large.
class SizeLimit : public Error {
 public:
  using Error::Error;
};

// 3D ground truth was requested from a scene that only carries 2D labels.
class LabelAccessError : public Error {
 public:
  using Error::Error;
};

// Bad run configuration: unknown keys, out-of-range values, missing files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace bevtune
