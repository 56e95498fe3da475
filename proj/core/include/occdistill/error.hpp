// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace occdistill {

// Precondition or contract violation on otherwise well-formed input.
// The CLI maps this to exit code 3.
class ValidationError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// Unreadable, unwritable or malformed file / config. The CLI maps this to exit code 2.
class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

} // namespace occdistill
