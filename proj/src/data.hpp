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
#include <span>
#include <string>
#include <vector>

#include "geometry.hpp"

namespace md {

enum class Split : std::uint8_t { kTrain = 0, kEval = 1 };

struct Dataset {
  Matrix inputs;  // M x D_in, one sample per row
  std::vector<int> labels;
  int num_classes = 0;
  std::vector<Split> splits;
  std::uint64_t seed = 0;
  double noise_sigma = 0.0;

  std::size_t size() const noexcept { return labels.size(); }
  int input_dim() const noexcept { return static_cast<int>(inputs.cols()); }

  std::vector<std::size_t> indices(Split split) const;
  Matrix gather(std::span<const std::size_t> rows) const;
  std::vector<int> gather_labels(std::span<const std::size_t> rows) const;

  // Throws kCorruptDataset if an invariant is violated.
  void validate() const;
};

struct GenerationParams {
  int num_classes = 64;
  int per_class = 200;
  int input_dim = 128;
  double noise_sigma = 0.3;
  std::uint64_t seed = 1;

  void validate() const;
};

// Each class owns a uniformly random unit direction; a sample is
// normalize(direction + noise_sigma * g / sqrt(D_in)) with g ~ N(0, I), so
// noise_sigma is the expected noise norm relative to the unit direction.
// The last 20% of every class (at least one sample) is tagged EVAL.
Dataset generate_synthetic(const GenerationParams& params);

struct VerificationPair {
  std::size_t a = 0;
  std::size_t b = 0;
  bool same = false;

  bool operator==(const VerificationPair&) const = default;
};

struct VerificationProtocol {
  std::vector<VerificationPair> pairs;
};

struct IdentificationProtocol {
  std::vector<std::size_t> probes;
  std::vector<std::size_t> gallery;  // gallery[k] pairs with probes[k]
  std::vector<std::size_t> distractors;
};

inline constexpr std::size_t kDefaultPairsPerKind = 3000;

VerificationProtocol build_verification_pairs(const Dataset& dataset,
                                              std::size_t n_pos,
                                              std::size_t n_neg,
                                              std::uint64_t seed);

IdentificationProtocol build_identification(const Dataset& dataset,
                                            std::size_t n_probe_identities,
                                            std::size_t n_distractors,
                                            std::uint64_t seed);

// Availability, so callers can cap requested counts.
struct ProtocolCapacity {
  std::size_t positive_pairs = 0;
  std::size_t negative_pairs = 0;
  std::size_t probe_identities = 0;  // identities with >= 2 EVAL samples
};

ProtocolCapacity protocol_capacity(const Dataset& dataset);

// Lower bound, over every seed, on the EVAL samples left for distractors once
// n_probe_identities identities are reserved for probes.
std::size_t distractor_capacity(const Dataset& dataset,
                                std::size_t n_probe_identities);

std::string dataset_to_bytes(const Dataset& dataset);
Dataset dataset_from_bytes(const std::string& bytes);

void dataset_save(const Dataset& dataset, const std::string& path);
Dataset dataset_load(const std::string& path);

}  // namespace md
