// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace tokd {

// Error taxonomy shared across the library. The CLI maps these onto
// stable exit codes (usage/config -> 2, data -> 3, numeric/state -> 4).
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

struct MetricError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace tokd
