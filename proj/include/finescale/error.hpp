// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace finescale {

enum class ErrorKind {
  config,
  shape,
  stride,
  infeasible_constraint,
  degenerate_batch,
  zero_norm,
  unknown_method,
  structure_mismatch,
  non_finite_loss,
  non_finite_gradient,
  empty_subset,
  spec,
  io,
  format,
  missing_mask,
  inconsistent_shape,
  too_small,
  nothing_to_report,
  internal,
};

const char* error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace finescale
