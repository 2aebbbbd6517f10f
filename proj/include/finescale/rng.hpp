// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace finescale {

/// Deterministic random stream keyed by (seed, stream_id). Equal keys give
/// identical draw sequences on every platform; distinct stream ids give
/// independent sequences. All distribution mappings are implemented here
/// rather than with std:: distributions, whose output is
/// implementation-defined.
class RngStream {
 public:
  RngStream(std::uint64_t seed, const std::string& stream_id);

  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform();
  double uniform(double lo, double hi);

  /// Uniform integer in [lo, hi], inclusive, unbiased via rejection.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  double normal(double mean = 0.0, double stddev = 1.0);
  bool bernoulli(double p);
  std::int64_t poisson(double lambda);

  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::int64_t i = static_cast<std::int64_t>(values.size()) - 1; i > 0; --i) {
      std::int64_t j = uniform_int(0, i);
      std::swap(values[static_cast<std::size_t>(i)], values[static_cast<std::size_t>(j)]);
    }
  }

  /// Textual engine state for checkpointing; round-trips exactly.
  std::string state() const;
  void set_state(const std::string& state);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// FNV-1a over a byte range; used for stream derivation and checksums.
std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t basis = 0xcbf29ce484222325ULL);

}  // namespace finescale
