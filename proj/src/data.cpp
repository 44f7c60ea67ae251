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

#include "data.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string_view>
#include <unordered_set>

#include <json.hpp>

#include "binary_io.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace md {

namespace {

constexpr std::string_view kDatasetMagic{"MDDSET\0\0", 8};
constexpr std::uint32_t kDatasetVersion = 1;

enum Stream : std::uint64_t {
  kDirectionStream = 1,
  kNoiseStream,
  kPositivePairStream,
  kNegativePairStream,
  kIdentityStream,
  kProbeStream,
  kDistractorStream,
};

[[noreturn]] void corrupt(const std::string& what) {
  fail(ErrorCode::kCorruptDataset, "corrupt dataset: " + what);
}

std::vector<std::vector<std::size_t>> eval_by_class(const Dataset& ds) {
  std::vector<std::vector<std::size_t>> groups(
      static_cast<std::size_t>(ds.num_classes));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.splits[i] == Split::kEval) {
      groups[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    }
  }
  return groups;
}

// First k entries of a seeded shuffle of `items`.
template <typename T>
std::vector<T> sample_without_replacement(std::vector<T> items, std::size_t k,
                                          std::uint64_t key) {
  RngStream rng(key);
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(items.size() - i));
    std::swap(items[i], items[j]);
  }
  items.resize(k);
  return items;
}

}  // namespace

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == split) out.push_back(i);
  }
  return out;
}

Matrix Dataset::gather(std::span<const std::size_t> rows) const {
  Matrix out(static_cast<Eigen::Index>(rows.size()), inputs.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.row(static_cast<Eigen::Index>(r)) =
        inputs.row(static_cast<Eigen::Index>(rows[r]));
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> rows) const {
  std::vector<int> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(labels[r]);
  return out;
}

void Dataset::validate() const {
  if (num_classes < 2) corrupt("need at least 2 classes");
  if (inputs.cols() < 2) corrupt("input dimension must be >= 2");
  if (static_cast<std::size_t>(inputs.rows()) != labels.size()) {
    corrupt("row count does not match label count");
  }
  if (splits.size() != labels.size()) corrupt("split tags missing");
  std::vector<int> per_class(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      corrupt("label " + std::to_string(labels[i]) + " at sample " +
              std::to_string(i) + " out of range");
    }
    if (splits[i] != Split::kTrain && splits[i] != Split::kEval) {
      corrupt("invalid split tag at sample " + std::to_string(i));
    }
    ++per_class[static_cast<std::size_t>(labels[i])];
  }
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    if (per_class[c] < 2) {
      corrupt("class " + std::to_string(c) + " has fewer than 2 samples");
    }
  }
  if (!inputs.allFinite()) corrupt("non-finite input values");
}

void GenerationParams::validate() const {
  require(num_classes >= 2, ErrorCode::kInvalidConfig,
          "classes must be >= 2 (got " + std::to_string(num_classes) + ")");
  require(per_class >= 2, ErrorCode::kInvalidConfig,
          "per-class must be >= 2 (got " + std::to_string(per_class) + ")");
  require(input_dim >= 2, ErrorCode::kInvalidConfig,
          "dim must be >= 2 (got " + std::to_string(input_dim) + ")");
  require(noise_sigma >= 0.0 && std::isfinite(noise_sigma),
          ErrorCode::kInvalidConfig, "noise must be finite and >= 0");
}

Dataset generate_synthetic(const GenerationParams& params) {
  params.validate();
  Dataset ds;
  ds.num_classes = params.num_classes;
  ds.seed = params.seed;
  ds.noise_sigma = params.noise_sigma;
  const int dim = params.input_dim;
  const std::size_t total =
      static_cast<std::size_t>(params.num_classes) * params.per_class;
  ds.inputs.resize(static_cast<Eigen::Index>(total), dim);
  ds.labels.reserve(total);
  ds.splits.reserve(total);

  const int n_eval = std::max(
      1, static_cast<int>(std::lround(0.2 * static_cast<double>(params.per_class))));
  const int n_train = params.per_class - n_eval;
  const double noise_scale = params.noise_sigma / std::sqrt(static_cast<double>(dim));

  Vector direction(dim);
  Vector sample(dim);
  Eigen::Index row = 0;
  for (int c = 0; c < params.num_classes; ++c) {
    RngStream dir_rng(derive_key(params.seed, kDirectionStream,
                                 static_cast<std::uint64_t>(c)));
    Vector raw(dim);
    for (int d = 0; d < dim; ++d) raw(d) = dir_rng.normal();
    direction = l2_normalize(raw);
    for (int k = 0; k < params.per_class; ++k) {
      RngStream noise_rng(derive_key(params.seed, kNoiseStream,
                                     static_cast<std::uint64_t>(c),
                                     static_cast<std::uint64_t>(k)));
      for (int d = 0; d < dim; ++d) {
        sample(d) = direction(d) + noise_scale * noise_rng.normal();
      }
      ds.inputs.row(row++) = l2_normalize(sample).transpose();
      ds.labels.push_back(c);
      ds.splits.push_back(k < n_train ? Split::kTrain : Split::kEval);
    }
  }
  ds.validate();
  return ds;
}

ProtocolCapacity protocol_capacity(const Dataset& dataset) {
  ProtocolCapacity cap;
  const auto groups = eval_by_class(dataset);
  std::size_t eval_total = 0;
  for (const auto& g : groups) {
    cap.positive_pairs += g.size() * (g.size() - (g.empty() ? 0 : 1)) / 2;
    eval_total += g.size();
    if (g.size() >= 2) ++cap.probe_identities;
  }
  const std::size_t all_pairs =
      eval_total * (eval_total - (eval_total == 0 ? 0 : 1)) / 2;
  cap.negative_pairs = all_pairs - cap.positive_pairs;
  return cap;
}

std::size_t distractor_capacity(const Dataset& dataset,
                                std::size_t n_probe_identities) {
  const auto groups = eval_by_class(dataset);
  std::vector<std::size_t> eligible;
  std::size_t total = 0;
  for (const auto& g : groups) {
    total += g.size();
    if (g.size() >= 2) eligible.push_back(g.size());
  }
  std::sort(eligible.begin(), eligible.end(), std::greater<>());
  for (std::size_t k = 0; k < n_probe_identities && k < eligible.size(); ++k) {
    total -= eligible[k];
  }
  return total;
}

VerificationProtocol build_verification_pairs(const Dataset& dataset,
                                              std::size_t n_pos,
                                              std::size_t n_neg,
                                              std::uint64_t seed) {
  const ProtocolCapacity cap = protocol_capacity(dataset);
  require(n_pos <= cap.positive_pairs, ErrorCode::kInsufficientSamples,
          "requested " + std::to_string(n_pos) + " positive pairs, only " +
              std::to_string(cap.positive_pairs) + " exist");
  require(n_neg <= cap.negative_pairs, ErrorCode::kInsufficientSamples,
          "requested " + std::to_string(n_neg) + " negative pairs, only " +
              std::to_string(cap.negative_pairs) + " exist");
  VerificationProtocol protocol;
  protocol.pairs.reserve(n_pos + n_neg);

  const auto groups = eval_by_class(dataset);
  std::vector<VerificationPair> positives;
  positives.reserve(cap.positive_pairs);
  for (const auto& g : groups) {
    for (std::size_t x = 0; x < g.size(); ++x) {
      for (std::size_t y = x + 1; y < g.size(); ++y) {
        positives.push_back({g[x], g[y], true});
      }
    }
  }
  for (const auto& p : sample_without_replacement(
           std::move(positives), n_pos,
           derive_key(seed, kPositivePairStream))) {
    protocol.pairs.push_back(p);
  }

  const std::vector<std::size_t> eval = dataset.indices(Split::kEval);
  const std::uint64_t neg_key = derive_key(seed, kNegativePairStream);
  if (2 * n_neg > cap.negative_pairs) {
    // Dense request: enumerate everything and subsample.
    std::vector<VerificationPair> negatives;
    negatives.reserve(cap.negative_pairs);
    for (std::size_t x = 0; x < eval.size(); ++x) {
      for (std::size_t y = x + 1; y < eval.size(); ++y) {
        if (dataset.labels[eval[x]] != dataset.labels[eval[y]]) {
          negatives.push_back({eval[x], eval[y], false});
        }
      }
    }
    for (const auto& p :
         sample_without_replacement(std::move(negatives), n_neg, neg_key)) {
      protocol.pairs.push_back(p);
    }
  } else {
    RngStream rng(neg_key);
    std::unordered_set<std::uint64_t> seen;
    while (seen.size() < n_neg) {
      std::size_t a = eval[rng.below(eval.size())];
      std::size_t b = eval[rng.below(eval.size())];
      if (dataset.labels[a] == dataset.labels[b]) continue;
      if (a > b) std::swap(a, b);
      if (!seen.insert(static_cast<std::uint64_t>(a) * dataset.size() + b).second) {
        continue;
      }
      protocol.pairs.push_back({a, b, false});
    }
  }
  return protocol;
}

IdentificationProtocol build_identification(const Dataset& dataset,
                                            std::size_t n_probe_identities,
                                            std::size_t n_distractors,
                                            std::uint64_t seed) {
  const auto groups = eval_by_class(dataset);
  std::vector<int> eligible;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    if (groups[c].size() >= 2) eligible.push_back(static_cast<int>(c));
  }
  require(n_probe_identities <= eligible.size(), ErrorCode::kInsufficientSamples,
          "requested " + std::to_string(n_probe_identities) +
              " probe identities, only " + std::to_string(eligible.size()) +
              " have two EVAL samples");
  const std::vector<int> chosen = sample_without_replacement(
      eligible, n_probe_identities, derive_key(seed, kIdentityStream));

  IdentificationProtocol protocol;
  std::vector<bool> is_probe_identity(groups.size(), false);
  for (int id : chosen) {
    is_probe_identity[static_cast<std::size_t>(id)] = true;
    const auto picked = sample_without_replacement(
        groups[static_cast<std::size_t>(id)], 2,
        derive_key(seed, kProbeStream, static_cast<std::uint64_t>(id)));
    protocol.probes.push_back(picked[0]);
    protocol.gallery.push_back(picked[1]);
  }
  std::vector<std::size_t> pool;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    if (is_probe_identity[c]) continue;
    pool.insert(pool.end(), groups[c].begin(), groups[c].end());
  }
  require(n_distractors <= pool.size(), ErrorCode::kInsufficientSamples,
          "requested " + std::to_string(n_distractors) + " distractors, only " +
              std::to_string(pool.size()) + " EVAL samples of other identities");
  protocol.distractors = sample_without_replacement(
      std::move(pool), n_distractors, derive_key(seed, kDistractorStream));
  return protocol;
}

std::string dataset_to_bytes(const Dataset& dataset) {
  dataset.validate();
  const nlohmann::json header = {
      {"format", "mdds"},
      {"version", kDatasetVersion},
      {"samples", dataset.size()},
      {"input_dim", dataset.input_dim()},
      {"classes", dataset.num_classes},
      {"seed", dataset.seed},
      {"noise_sigma", dataset.noise_sigma},
      {"layout", "f64 inputs row-major, i32 labels, u8 split tags (0 train, 1 eval)"},
  };
  const std::string json = header.dump();
  std::string out(kDatasetMagic);
  io::put_le<std::uint64_t>(out, json.size());
  out += json;
  for (Eigen::Index r = 0; r < dataset.inputs.rows(); ++r) {
    for (Eigen::Index c = 0; c < dataset.inputs.cols(); ++c) {
      io::put_le<double>(out, dataset.inputs(r, c));
    }
  }
  for (int label : dataset.labels) io::put_le<std::int32_t>(out, label);
  for (Split s : dataset.splits) {
    io::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(s));
  }
  return out;
}

Dataset dataset_from_bytes(const std::string& bytes) {
  io::ByteReader in(bytes, ErrorCode::kCorruptDataset);
  if (in.take(kDatasetMagic.size()) != kDatasetMagic) corrupt("bad magic");
  const auto json_len = in.get_le<std::uint64_t>();
  if (json_len > in.remaining()) corrupt("header length exceeds file size");
  Dataset ds;
  std::size_t samples = 0;
  int input_dim = 0;
  try {
    const auto header =
        nlohmann::json::parse(in.take(static_cast<std::size_t>(json_len)));
    if (header.at("format").get<std::string>() != "mdds") corrupt("bad format tag");
    const auto version = header.at("version").get<std::uint32_t>();
    if (version != kDatasetVersion) {
      corrupt("unsupported version " + std::to_string(version));
    }
    samples = header.at("samples").get<std::size_t>();
    input_dim = header.at("input_dim").get<int>();
    ds.num_classes = header.at("classes").get<int>();
    ds.seed = header.at("seed").get<std::uint64_t>();
    ds.noise_sigma = header.at("noise_sigma").get<double>();
  } catch (const nlohmann::json::exception& e) {
    corrupt(std::string("bad header: ") + e.what());
  }
  if (input_dim < 2) corrupt("input dimension must be >= 2");
  const std::uint64_t expected =
      static_cast<std::uint64_t>(samples) * input_dim * sizeof(double) +
      static_cast<std::uint64_t>(samples) * (sizeof(std::int32_t) + 1);
  if (in.remaining() < expected) corrupt("payload truncated (split tags or data missing)");
  if (in.remaining() > expected) corrupt("trailing bytes after payload");
  ds.inputs.resize(static_cast<Eigen::Index>(samples), input_dim);
  for (Eigen::Index r = 0; r < ds.inputs.rows(); ++r) {
    for (Eigen::Index c = 0; c < ds.inputs.cols(); ++c) {
      ds.inputs(r, c) = in.get_le<double>();
    }
  }
  ds.labels.resize(samples);
  for (auto& label : ds.labels) label = in.get_le<std::int32_t>();
  ds.splits.resize(samples);
  for (auto& s : ds.splits) s = static_cast<Split>(in.get_le<std::uint8_t>());
  ds.validate();
  return ds;
}

void dataset_save(const Dataset& dataset, const std::string& path) {
  io::write_file(path, dataset_to_bytes(dataset));
}

Dataset dataset_load(const std::string& path) {
  return dataset_from_bytes(io::read_file(path));
}

}  // namespace md
