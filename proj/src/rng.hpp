// Copyright 2026 The margindistill Authors
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

#include <cstddef>
#include <cstdint>
#include <vector>

namespace md {

// SplitMix64 finalizer. Every random value in the project is a pure function
// of (key, counter), so results do not depend on call order or platform.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_key(std::uint64_t seed, std::uint64_t stream,
                                   std::uint64_t a = 0,
                                   std::uint64_t b = 0) noexcept {
  std::uint64_t k = mix64(seed ^ 0x6D61726769ULL);
  k = mix64(k ^ stream);
  k = mix64(k ^ a);
  return mix64(k ^ b);
}

// Sequential view over a counter-based generator.
class RngStream {
 public:
  explicit RngStream(std::uint64_t key) noexcept : key_(key) {}

  std::uint64_t next_u64() noexcept {
    return mix64(key_ ^ mix64(counter_++));
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) noexcept {
    return lo + (hi - lo) * uniform();
  }

  // Standard normal via Box-Muller (one draw per call, the sine half is
  // discarded so each value depends on exactly two counters).
  double normal() noexcept;

  // Uniform integer in [0, n), n > 0.
  std::uint64_t below(std::uint64_t n) noexcept;

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Fisher-Yates permutation of [0, n).
std::vector<std::size_t> permutation(std::size_t n, std::uint64_t key);

}  // namespace md
