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

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "data.hpp"
#include "network.hpp"

namespace md {

struct VerificationResult {
  double accuracy = 0.0;
  double best_threshold = -1.0;
};

// Pairs with score >= threshold are declared "same identity". Candidate
// thresholds are -1, +1 and the midpoints between consecutive distinct
// scores; the smallest threshold reaching the best accuracy is returned.
VerificationResult verification_sweep(std::span<const double> scores,
                                      std::span<const bool> same);

VerificationResult verification_accuracy(const Checkpoint& embedder,
                                         const Dataset& dataset,
                                         const VerificationProtocol& protocol);

// Rows are unit embeddings. A probe is a hit iff its own gallery entry
// scores strictly higher than every other gallery entry and distractor.
double rank1_from_embeddings(const Matrix& probes, const Matrix& gallery,
                             const Matrix& distractors);

double rank1_identification(const Checkpoint& embedder, const Dataset& dataset,
                            const IdentificationProtocol& protocol);

// Stable digest of both protocols, used to refuse cross-protocol comparisons.
std::string protocol_fingerprint(const VerificationProtocol& verification,
                                 const IdentificationProtocol& identification);

struct MetricsReport {
  std::string method;  // "teacher" for the teacher row
  std::uint64_t seed = 0;
  double verification_accuracy = 0.0;
  double best_threshold = 0.0;
  double rank1_accuracy = 0.0;
  std::string protocol;  // protocol_fingerprint
  double timing_seconds = 0.0;  // never serialized
};

MetricsReport evaluate(const Checkpoint& embedder, const Dataset& dataset,
                       const VerificationProtocol& verification,
                       const IdentificationProtocol& identification,
                       std::string method);

nlohmann::json report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);

struct GapRow {
  std::string method;
  double verification_accuracy = 0.0;
  double best_threshold = 0.0;
  double rank1_accuracy = 0.0;
  double delta_vs_teacher_rank1 = 0.0;
  std::optional<double> delta_vs_baseline_rank1;  // needs an "arcface" student
  std::uint64_t seed = 0;
};

// Teacher row plus one row per student, sorted by rank-1 descending (stable).
std::vector<GapRow> gap_report(const MetricsReport& teacher,
                               std::span<const MetricsReport> students);

inline constexpr const char* kGapCsvHeader =
    "method,verification_accuracy,best_threshold,rank1_accuracy,"
    "delta_vs_teacher_rank1,delta_vs_baseline_rank1,seed";

std::string gap_report_csv(std::span<const GapRow> rows, bool with_header = true);
std::string gap_report_text(std::span<const GapRow> rows);

// Mean and sample standard deviation per method, in first-seen order.
struct AggregateRow {
  std::string method;
  std::size_t seeds = 0;
  double verification_mean = 0.0;
  double verification_std = 0.0;
  double rank1_mean = 0.0;
  double rank1_std = 0.0;
};

std::vector<AggregateRow> aggregate_reports(std::span<const MetricsReport> reports);

inline constexpr const char* kAggregateCsvHeader =
    "method,seeds,verification_mean,verification_std,rank1_mean,rank1_std";

std::string aggregate_csv(std::span<const AggregateRow> rows);
std::string aggregate_text(std::span<const AggregateRow> rows);

}  // namespace md
