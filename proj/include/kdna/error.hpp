/*
 * Copyright 2026 The KernelDNA Engine Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
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

namespace kdna {

/// Base of every error the engine throws. `kind()` is a stable short tag
/// that the CLI prints as a machine-parsable prefix.
class Error : public std::runtime_error {
 public:
  Error(const char* kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  const char* kind() const noexcept { return kind_; }

 private:
  const char* kind_;
};

#define KDNA_DEFINE_ERROR(Name, tag)                              \
  class Name : public Error {                                     \
   public:                                                        \
    explicit Name(const std::string& what) : Error(tag, what) {}  \
  };

KDNA_DEFINE_ERROR(ShapeError, "shape")
KDNA_DEFINE_ERROR(BroadcastError, "broadcast")
KDNA_DEFINE_ERROR(ContractError, "contract")
KDNA_DEFINE_ERROR(FormatError, "format")
KDNA_DEFINE_ERROR(ConfigError, "config")
KDNA_DEFINE_ERROR(StateError, "state")
KDNA_DEFINE_ERROR(InputError, "input")
KDNA_DEFINE_ERROR(DegenerateInputError, "degenerate")
KDNA_DEFINE_ERROR(TrainingError, "training")

#undef KDNA_DEFINE_ERROR

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : Error("parse", what + " (at position " + std::to_string(position) + ")"),
        position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

}  // namespace kdna
