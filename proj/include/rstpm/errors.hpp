// Copyright 2026 The rstpm Authors
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

#include <stdexcept>
#include <string>

namespace rstpm {

/// Tensor dimensions do not fit the operation.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// An object was used before it reached the state the call needs.
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite value detected (gradient NaN, diverged loss).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid specification or configuration value.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Corrupt, truncated or incompatible bundle / archive file.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Input data violates a contract (e.g. defect images in a train split).
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dataset on disk is incomplete or unreadable.
struct IngestionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Metric is undefined for the given labels (single class).
struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename E>
[[noreturn]] inline void raise(const std::string& what) {
  throw E(what);
}

}  // namespace detail

#define RSTPM_REQUIRE(cond, Error, msg)       \
  do {                                        \
    if (!(cond)) ::rstpm::detail::raise<Error>(msg); \
  } while (0)

}  // namespace rstpm
