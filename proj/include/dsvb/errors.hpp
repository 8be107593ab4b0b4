/* Copyright 2026 The DSVB Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include <stdexcept>
#include <string>

namespace dsvb {

// Programming errors: a caller violated a documented precondition.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Raised by masked softmax when a neighborhood has no members.
struct DegenerateNeighborhoodError : ContractError {
  using ContractError::ContractError;
};

// Data errors: bad files, bad signals, bad configuration. The CLI maps these
// to exit code 2.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateSignalError : InputError {
  using InputError::InputError;
};

struct ConfigError : InputError {
  using InputError::InputError;
};

// Non-finite values during optimization. Exit code 3.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace dsvb
