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

#include "evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>

#include "errors.hpp"
#include "rng.hpp"

namespace md {

namespace {

// Fixed-point rendering; folds -0 into 0 so reruns stay byte-identical.
std::string fixed(double v, int digits = 6) {
  if (v == 0.0) v = 0.0;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  std::string s(buf);
  if (s.find_first_not_of("-0.") == std::string::npos && s.front() == '-') {
    s.erase(0, 1);
  }
  return s;
}

Matrix embed_rows(const Checkpoint& embedder, const Dataset& dataset,
                  std::span<const std::size_t> rows) {
  if (rows.empty()) return Matrix(0, embedder.params.embedding_dim());
  return mlp_embed(embedder.params, dataset.gather(rows)).matrix();
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

VerificationResult verification_sweep(std::span<const double> scores,
                                      std::span<const bool> same) {
  require(!scores.empty(), ErrorCode::kEmptyProtocol, "verification protocol is empty");
  require(scores.size() == same.size(), ErrorCode::kDimensionMismatch,
          "score and label counts differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  const auto total = static_cast<double>(scores.size());
  std::size_t positives = 0;
  for (bool s : same) positives += s ? 1 : 0;

  // Threshold t classifies scores >= t as same. Walking the sorted scores,
  // `below_pos` / `below_neg` count pairs strictly under the threshold.
  std::size_t below_pos = 0;
  std::size_t below_neg = 0;
  auto correct = [&] {
    return static_cast<double>(below_neg + (positives - below_pos));
  };
  VerificationResult best;
  std::size_t k = 0;
  // Scores at exactly -1 sit at the lowest threshold, counted as "same".
  best.best_threshold = -1.0;
  best.accuracy = correct() / total;
  while (k < order.size()) {
    const double value = scores[order[k]];
    while (k < order.size() && scores[order[k]] == value) {
      if (same[order[k]]) {
        ++below_pos;
      } else {
        ++below_neg;
      }
      ++k;
    }
    const double threshold =
        k < order.size() ? 0.5 * (value + scores[order[k]]) : 1.0;
    if (k == order.size() && value >= 1.0) {
      // No threshold <= 1 lies above a score of 1.
      break;
    }
    const double acc = correct() / total;
    if (acc > best.accuracy) {
      best.accuracy = acc;
      best.best_threshold = threshold;
    }
  }
  return best;
}

VerificationResult verification_accuracy(const Checkpoint& embedder,
                                         const Dataset& dataset,
                                         const VerificationProtocol& protocol) {
  require(!protocol.pairs.empty(), ErrorCode::kEmptyProtocol,
          "verification protocol is empty");
  std::vector<std::size_t> rows;
  rows.reserve(protocol.pairs.size() * 2);
  for (const auto& p : protocol.pairs) {
    rows.push_back(p.a);
    rows.push_back(p.b);
  }
  const Matrix emb = embed_rows(embedder, dataset, rows);
  std::vector<double> scores(protocol.pairs.size());
  const auto same = std::make_unique<bool[]>(protocol.pairs.size());
  for (std::size_t k = 0; k < protocol.pairs.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(2 * k);
    scores[k] = emb.row(r).dot(emb.row(r + 1));
    same[k] = protocol.pairs[k].same;
  }
  return verification_sweep(scores, {same.get(), scores.size()});
}

double rank1_from_embeddings(const Matrix& probes, const Matrix& gallery,
                             const Matrix& distractors) {
  require(probes.rows() >= 1, ErrorCode::kEmptyProtocol,
          "identification protocol has no probes");
  require(probes.rows() == gallery.rows(), ErrorCode::kDimensionMismatch,
          "probe and gallery counts differ");
  require(gallery.cols() == probes.cols() &&
              (distractors.rows() == 0 || distractors.cols() == probes.cols()),
          ErrorCode::kDimensionMismatch, "embedding widths differ");
  const Matrix to_gallery = probes * gallery.transpose();
  Matrix to_distractors;
  if (distractors.rows() > 0) to_distractors = probes * distractors.transpose();
  std::size_t hits = 0;
  for (Eigen::Index p = 0; p < probes.rows(); ++p) {
    const double own = to_gallery(p, p);
    bool hit = true;
    for (Eigen::Index g = 0; g < gallery.rows() && hit; ++g) {
      if (g != p && to_gallery(p, g) >= own) hit = false;
    }
    for (Eigen::Index d = 0; d < to_distractors.cols() && hit; ++d) {
      if (to_distractors(p, d) >= own) hit = false;
    }
    hits += hit ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(probes.rows());
}

double rank1_identification(const Checkpoint& embedder, const Dataset& dataset,
                            const IdentificationProtocol& protocol) {
  require(!protocol.probes.empty(), ErrorCode::kEmptyProtocol,
          "identification protocol has no probes");
  return rank1_from_embeddings(embed_rows(embedder, dataset, protocol.probes),
                               embed_rows(embedder, dataset, protocol.gallery),
                               embed_rows(embedder, dataset, protocol.distractors));
}

std::string protocol_fingerprint(const VerificationProtocol& verification,
                                 const IdentificationProtocol& identification) {
  std::uint64_t h = mix64(0x70726F746FULL);
  auto feed = [&h](std::uint64_t v) { h = mix64(h ^ v); };
  feed(verification.pairs.size());
  for (const auto& p : verification.pairs) {
    feed(p.a);
    feed(p.b);
    feed(p.same ? 1 : 0);
  }
  for (const auto* list : {&identification.probes, &identification.gallery,
                           &identification.distractors}) {
    feed(list->size());
    for (std::size_t i : *list) feed(i);
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

MetricsReport evaluate(const Checkpoint& embedder, const Dataset& dataset,
                       const VerificationProtocol& verification,
                       const IdentificationProtocol& identification,
                       std::string method) {
  const auto start = std::chrono::steady_clock::now();
  MetricsReport r;
  r.method = std::move(method);
  r.seed = embedder.meta.seed;
  const VerificationResult v = verification_accuracy(embedder, dataset, verification);
  r.verification_accuracy = v.accuracy;
  r.best_threshold = v.best_threshold;
  r.rank1_accuracy = rank1_identification(embedder, dataset, identification);
  r.protocol = protocol_fingerprint(verification, identification);
  r.timing_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

nlohmann::json report_to_json(const MetricsReport& r) {
  return {{"method", r.method},
          {"seed", r.seed},
          {"verification_accuracy", r.verification_accuracy},
          {"best_threshold", r.best_threshold},
          {"rank1_accuracy", r.rank1_accuracy},
          {"protocol", r.protocol}};
}

MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  try {
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.verification_accuracy = j.at("verification_accuracy").get<double>();
    r.best_threshold = j.at("best_threshold").get<double>();
    r.rank1_accuracy = j.at("rank1_accuracy").get<double>();
    r.protocol = j.at("protocol").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidConfig, std::string("bad metrics report: ") + e.what());
  }
  const auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  require(in_unit(r.verification_accuracy) && in_unit(r.rank1_accuracy) &&
              r.best_threshold >= -1.0 && r.best_threshold <= 1.0,
          ErrorCode::kInvalidConfig, "metrics report values out of range");
  return r;
}

std::vector<GapRow> gap_report(const MetricsReport& teacher,
                               std::span<const MetricsReport> students) {
  std::optional<double> baseline;
  for (const auto& s : students) {
    require(s.protocol == teacher.protocol, ErrorCode::kProtocolMismatch,
            "report '" + s.method + "' was evaluated on protocol " + s.protocol +
                ", teacher on " + teacher.protocol);
    if (s.method == "arcface" && !baseline) baseline = s.rank1_accuracy;
  }
  auto row_for = [&](const MetricsReport& r) {
    GapRow row;
    row.method = r.method;
    row.verification_accuracy = r.verification_accuracy;
    row.best_threshold = r.best_threshold;
    row.rank1_accuracy = r.rank1_accuracy;
    row.delta_vs_teacher_rank1 = r.rank1_accuracy - teacher.rank1_accuracy;
    if (baseline) row.delta_vs_baseline_rank1 = r.rank1_accuracy - *baseline;
    row.seed = r.seed;
    return row;
  };
  std::vector<GapRow> rows{row_for(teacher)};
  for (const auto& s : students) rows.push_back(row_for(s));
  std::stable_sort(rows.begin(), rows.end(), [](const GapRow& a, const GapRow& b) {
    return a.rank1_accuracy > b.rank1_accuracy;
  });
  return rows;
}

std::string gap_report_csv(std::span<const GapRow> rows, bool with_header) {
  std::string out;
  if (with_header) out += std::string(kGapCsvHeader) + "\n";
  for (const auto& r : rows) {
    out += r.method + "," + fixed(r.verification_accuracy) + "," +
           fixed(r.best_threshold) + "," + fixed(r.rank1_accuracy) + "," +
           fixed(r.delta_vs_teacher_rank1) + "," +
           (r.delta_vs_baseline_rank1 ? fixed(*r.delta_vs_baseline_rank1) : "") +
           "," + std::to_string(r.seed) + "\n";
  }
  return out;
}

std::string gap_report_text(std::span<const GapRow> rows) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-12s %10s %10s %10s %12s %12s %6s\n", "method",
                "verif", "threshold", "rank1", "d_teacher", "d_arcface", "seed");
  out += line;
  for (const auto& r : rows) {
    const std::string base =
        r.delta_vs_baseline_rank1 ? fixed(*r.delta_vs_baseline_rank1, 4) : "-";
    std::snprintf(line, sizeof(line), "%-12s %10s %10s %10s %12s %12s %6llu\n",
                  r.method.c_str(), fixed(r.verification_accuracy, 4).c_str(),
                  fixed(r.best_threshold, 4).c_str(),
                  fixed(r.rank1_accuracy, 4).c_str(),
                  fixed(r.delta_vs_teacher_rank1, 4).c_str(), base.c_str(),
                  static_cast<unsigned long long>(r.seed));
    out += line;
  }
  return out;
}

std::vector<AggregateRow> aggregate_reports(std::span<const MetricsReport> reports) {
  std::vector<std::string> order;
  for (const auto& r : reports) {
    if (std::find(order.begin(), order.end(), r.method) == order.end()) {
      order.push_back(r.method);
    }
  }
  std::vector<AggregateRow> rows;
  for (const auto& method : order) {
    std::vector<double> verif;
    std::vector<double> rank1;
    for (const auto& r : reports) {
      if (r.method != method) continue;
      verif.push_back(r.verification_accuracy);
      rank1.push_back(r.rank1_accuracy);
    }
    rows.push_back({method, verif.size(), mean(verif), sample_std(verif),
                    mean(rank1), sample_std(rank1)});
  }
  return rows;
}

std::string aggregate_csv(std::span<const AggregateRow> rows) {
  std::string out = std::string(kAggregateCsvHeader) + "\n";
  for (const auto& r : rows) {
    out += r.method + "," + std::to_string(r.seeds) + "," +
           fixed(r.verification_mean) + "," + fixed(r.verification_std) + "," +
           fixed(r.rank1_mean) + "," + fixed(r.rank1_std) + "\n";
  }
  return out;
}

std::string aggregate_text(std::span<const AggregateRow> rows) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-12s %5s %20s %20s\n", "method", "seeds",
                "verification", "rank1");
  out += line;
  for (const auto& r : rows) {
    const std::string v =
        fixed(r.verification_mean, 4) + " +- " + fixed(r.verification_std, 4);
    const std::string k = fixed(r.rank1_mean, 4) + " +- " + fixed(r.rank1_std, 4);
    std::snprintf(line, sizeof(line), "%-12s %5zu %20s %20s\n", r.method.c_str(),
                  r.seeds, v.c_str(), k.c_str());
    out += line;
  }
  return out;
}

}  // namespace md
