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

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rng.hpp"

namespace {

TEST_CASE("mix64 reference values") {
  // SplitMix64 outputs for the state sequence starting at 0.
  CHECK(md::mix64(0) == 0xE220A8397B1DCDAFULL);
  CHECK(md::mix64(0x9E3779B97F4A7C15ULL) == 0x6E789E6AA1B965F4ULL);
}

TEST_CASE("streams are pure functions of the key") {
  md::RngStream a(md::derive_key(1, 2, 3, 4));
  md::RngStream b(md::derive_key(1, 2, 3, 4));
  md::RngStream c(md::derive_key(1, 2, 3, 5));
  int differ = 0;
  for (int k = 0; k < 100; ++k) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differ += x != c.next_u64() ? 1 : 0;
  }
  CHECK(differ == 100);
}

TEST_CASE("uniform and normal moments") {
  md::RngStream rng(md::derive_key(9, 9));
  const int n = 200000;
  double su = 0.0, sn = 0.0, sn2 = 0.0;
  for (int k = 0; k < n; ++k) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  CHECK(su / n == doctest::Approx(0.5).epsilon(0.01));
  CHECK(std::abs(sn / n) < 0.01);
  CHECK(sn2 / n == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("below covers the range without bias") {
  md::RngStream rng(md::derive_key(5, 5));
  std::vector<int> counts(7, 0);
  for (int k = 0; k < 70000; ++k) ++counts[rng.below(7)];
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
  CHECK(rng.below(1) == 0);
}

TEST_CASE("permutation is a bijection and deterministic") {
  for (std::size_t n : {0u, 1u, 2u, 17u, 1000u}) {
    auto p = md::permutation(n, 42);
    CHECK(p == md::permutation(n, 42));
    std::sort(p.begin(), p.end());
    std::vector<std::size_t> iota(n);
    std::iota(iota.begin(), iota.end(), 0);
    CHECK(p == iota);
  }
  CHECK(md::permutation(50, 1) != md::permutation(50, 2));
}

}  // namespace
