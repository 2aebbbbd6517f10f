// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#include "finescale/rng.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "finescale/error.hpp"

namespace finescale {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t basis) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t hash = basis;
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

RngStream::RngStream(std::uint64_t seed, const std::string& stream_id) {
  std::uint64_t mix = seed ^ fnv1a64(stream_id.data(), stream_id.size());
  // A couple of splitmix rounds decorrelate nearby (seed, id) keys.
  std::uint64_t derived = splitmix64(mix);
  derived ^= splitmix64(mix);
  engine_.seed(derived);
}

std::uint64_t RngStream::next_u64() { return engine_(); }

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::int64_t RngStream::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (lo > hi) throw Error(ErrorKind::internal, "uniform_int: empty range");
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1ULL;
  if (span == 0) return static_cast<std::int64_t>(next_u64());  // full 64-bit range
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % span;
  std::uint64_t draw;
  do {
    draw = next_u64();
  } while (draw >= limit);
  return lo + static_cast<std::int64_t>(draw % span);
}

double RngStream::normal(double mean, double stddev) {
  if (has_spare_) {
    has_spare_ = false;
    return mean + stddev * spare_;
  }
  // Box-Muller; u1 in (0,1] so log stays finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * M_PI * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return mean + stddev * radius * std::cos(angle);
}

bool RngStream::bernoulli(double p) { return uniform() < p; }

std::int64_t RngStream::poisson(double lambda) {
  if (lambda < 0.0) throw Error(ErrorKind::internal, "poisson: negative rate");
  if (lambda == 0.0) return 0;
  if (lambda > 30.0) return poisson(30.0) + poisson(lambda - 30.0);
  const double limit = std::exp(-lambda);
  std::int64_t k = 0;
  double prod = 1.0;
  do {
    ++k;
    prod *= uniform();
  } while (prod > limit);
  return k - 1;
}

std::string RngStream::state() const {
  std::ostringstream oss;
  oss << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
  oss.precision(17);
  oss << spare_;
  return oss.str();
}

void RngStream::set_state(const std::string& state) {
  std::istringstream iss(state);
  int spare_flag = 0;
  iss >> engine_ >> spare_flag >> spare_;
  if (iss.fail()) throw Error(ErrorKind::format, "invalid rng state string");
  has_spare_ = spare_flag != 0;
}

}  // namespace finescale
