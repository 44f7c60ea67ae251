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

// Acceptance suite. One verdict line per criterion; exit status is nonzero if
// any criterion fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "data.hpp"
#include "evaluation.hpp"
#include "geometry.hpp"
#include "losses.hpp"
#include "network.hpp"
#include "rng.hpp"
#include "support/oracles.hpp"
#include "support/temp_dir.hpp"
#include "training.hpp"

namespace {

using md::Matrix;
namespace t = md::testing;

struct Verdict {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, a, b, c);
  return buf;
}

int run_cli(const std::string& args, const std::string& log) {
  const std::string cmd = std::string(MD_CLI_PATH) + " " + args + " >>" + log + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Matrix embedding_cos(md::RngStream& rng) {
  const Matrix x = t::random_unit_rows(8, 16, rng);
  const Matrix w = t::random_unit_cols(16, 5, rng);
  return md::cosine_logits(md::EmbeddingBatch(x), md::ClassCenters(w)).matrix();
}

// ---- 1 ----------------------------------------------------------------------

Verdict formula_reductions() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    md::RngStream rng(md::derive_key(seed, 1001));
    const Matrix c = embedding_cos(rng);
    const std::vector<int> y = t::random_labels(8, 5, rng);
    const md::CosineLogits logits(c);
    worst = std::max(
        {worst,
         std::abs(md::unified_margin_loss(logits, y, md::MarginSpec::sphereface()).value -
                  t::sphereface_oracle(c, y, 64.0)),
         std::abs(md::unified_margin_loss(logits, y, md::MarginSpec::cosface()).value -
                  t::cosface_oracle(c, y, 64.0)),
         std::abs(md::unified_margin_loss(logits, y, md::MarginSpec::arcface()).value -
                  t::arcface_oracle(c, y, 64.0))});
  }
  return {worst < 1e-9, fmt("100 batches x 3 presets, max |delta| = %.3g (< 1e-9)", worst)};
}

// ---- 2 ----------------------------------------------------------------------

Verdict gradient_suite() {
  constexpr std::uint64_t kSeeds = 20;
  std::map<std::string, double> worst;
  const auto note = [&](const std::string& name, double err) {
    worst[name] = std::max(worst[name], err);
  };
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    md::RngStream rng(md::derive_key(seed, 1002));
    {
      Matrix c = embedding_cos(rng);
      const std::vector<int> y = t::random_labels(8, 5, rng);
      for (const auto& spec : {md::MarginSpec::sphereface(), md::MarginSpec::cosface(),
                               md::MarginSpec::arcface()}) {
        const auto out = md::unified_margin_loss(md::CosineLogits(c), y, spec);
        note("unified", t::max_relative_error(
                            out.grad_logits, t::numeric_gradient(c, [&] {
                              return md::unified_margin_loss(md::CosineLogits(c), y, spec).value;
                            })));
      }
    }
    {
      Matrix c = embedding_cos(rng);
      const std::vector<int> y = t::random_labels(8, 5, rng);
      std::vector<double> a(8);
      for (auto& v : a) v = rng.uniform(-0.2, 1.0);
      const auto pm = md::per_sample_margins(a);
      const auto out = md::margin_distillation_loss(md::CosineLogits(c), y, pm, 64.0);
      note("margin-distillation",
           t::max_relative_error(out.grad_logits, t::numeric_gradient(c, [&] {
                                   return md::margin_distillation_loss(md::CosineLogits(c), y,
                                                                       pm, 64.0)
                                       .value;
                                 })));
    }
    for (auto metric : {md::TripletMetric::kL2, md::TripletMetric::kCos}) {
      md::TripletBatch s{t::random_unit_rows(8, 16, rng), t::random_unit_rows(8, 16, rng),
                         t::random_unit_rows(8, 16, rng)};
      const md::TripletBatch tb{t::random_unit_rows(8, 16, rng),
                                t::random_unit_rows(8, 16, rng),
                                t::random_unit_rows(8, 16, rng)};
      s.negative = 0.5 * s.negative + 0.5 * s.anchor;
      const auto out = md::triplet_distillation_loss(s, tb, 0.2, 0.5, metric);
      const auto f = [&] { return md::triplet_distillation_loss(s, tb, 0.2, 0.5, metric).value; };
      note("triplet", t::max_relative_error(out.grad_anchor, t::numeric_gradient(s.anchor, f)));
      note("triplet",
           t::max_relative_error(out.grad_positive, t::numeric_gradient(s.positive, f)));
      note("triplet",
           t::max_relative_error(out.grad_negative, t::numeric_gradient(s.negative, f)));
    }
    {
      Matrix s = t::random_matrix(8, 16, rng);
      const Matrix tb = t::random_unit_rows(8, 16, rng);
      const auto out = md::angular_distillation_loss(s, tb);
      note("angular", t::max_relative_error(out.grad, t::numeric_gradient(s, [&] {
                                              return md::angular_distillation_loss(s, tb).value;
                                            })));
    }
    {
      Matrix cs = embedding_cos(rng);
      const Matrix ct = embedding_cos(rng);
      const std::vector<int> y = t::random_labels(8, 5, rng);
      const auto spec = md::MarginSpec::arcface();
      const auto out =
          md::temperature_kd_loss(md::CosineLogits(cs), md::CosineLogits(ct), y, spec, 4.0, 0.0);
      note("temperature-kd",
           t::max_relative_error(out.grad_logits, t::numeric_gradient(cs, [&] {
                                   return md::temperature_kd_loss(md::CosineLogits(cs),
                                                                  md::CosineLogits(ct), y, spec,
                                                                  4.0, 0.0)
                                       .value;
                                 })));
    }
    {
      md::MlpParams p = md::init_mlp({6, 9, 7, 5}, seed);
      for (auto& b : p.biases) b = 0.1 * t::random_matrix(b.size(), 1, rng);
      const Matrix in = t::random_matrix(4, 6, rng);
      Matrix w_raw = t::random_matrix(5, 3, rng, 0.7);
      const std::vector<int> y = t::random_labels(4, 3, rng);
      const auto spec = md::MarginSpec::arcface(16.0);
      const auto loss = [&] {
        return md::unified_margin_loss(
                   md::cosine_logits(md::mlp_embed(p, in), md::ClassCenters::from_raw(w_raw)),
                   y, spec)
            .value;
      };
      std::vector<double> wn;
      const md::ClassCenters w(md::normalize_cols(w_raw, &wn));
      const auto fwd = md::mlp_forward(p, in);
      const auto out = md::unified_margin_loss(md::cosine_logits(fwd.embeddings, w), y, spec);
      const auto g = md::backprop_to_embeddings(out.grad_logits, fwd.embeddings, w, {}, wn);
      const auto grads = md::mlp_backward(p, fwd.cache, g.grad_x);
      note("network-chain", t::max_relative_error(g.grad_w, t::numeric_gradient(w_raw, loss)));
      for (std::size_t l = 0; l < p.num_layers(); ++l) {
        note("network-chain",
             t::max_relative_error(grads.weights[l], t::numeric_gradient(p.weights[l], loss)));
        Matrix b = p.biases[l];
        const Matrix num_b = t::numeric_gradient(b, [&] {
          p.biases[l] = b;
          return loss();
        });
        p.biases[l] = b;
        note("network-chain", t::max_relative_error(grads.biases[l], num_b));
      }
    }
  }
  bool pass = true;
  std::string detail = "20 seeds, step 1e-5:";
  for (const auto& [name, err] : worst) {
    pass = pass && err < 1e-4;
    detail += " " + name + fmt(" %.2g", err);
  }
  return {pass, detail + " (each < 1e-4)"};
}

// ---- 3 ----------------------------------------------------------------------

Verdict margin_law() {
  bool pass = true;
  std::size_t checked = 0;
  std::size_t degenerate = 0;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    md::RngStream rng(md::derive_key(seed, 1003));
    const std::size_t n = 2 + rng.below(127);
    std::vector<double> a(n);
    for (auto& v : a) v = rng.uniform(-0.3, 1.0);
    a[rng.below(n)] = 0.0;
    const auto pm = md::per_sample_margins(a, 0.2, 0.5);
    for (std::size_t i = 0; i < n; ++i) {
      const double m = pm.margins[i];
      pass = pass && m >= 0.2 && m <= 0.5;
      if (a[i] <= 0.0) pass = pass && m == 0.2;
      // A batch without a positive cosine gets m_min everywhere.
      if (pm.a_max < 1e-7) {
        pass = pass && m == 0.2;
        ++degenerate;
      } else if (a[i] == pm.a_max) {
        pass = pass && m == 0.5;
      }
      for (std::size_t j = 0; j < n; ++j) {
        if (a[i] <= a[j]) pass = pass && m <= pm.margins[j];
      }
      ++checked;
    }
  }
  return {pass, "500 batches, " + std::to_string(checked) +
                    " margins: range [0.2, 0.5], monotone, m(a_max) = 0.5, m(0) = 0.2 (" +
                    std::to_string(degenerate) + " in batches with a_max = 0, all 0.2)"};
}

// ---- 4 ----------------------------------------------------------------------

Verdict frozen_centers(const md::Dataset& ds) {
  auto tc = md::TrainConfig::teacher_preset();
  tc.total_iterations = 500;
  tc.optimizer.milestones = {250, 375, 450};
  const md::Checkpoint teacher = md::train_teacher(tc, ds);
  auto sc = md::TrainConfig::student_preset(md::Method::kMarginDistillation);
  sc.total_iterations = 500;
  sc.optimizer.milestones = {250, 375, 450};
  std::size_t iterations = 0;
  std::size_t mismatches = 0;
  const md::Checkpoint student =
      md::distill_student(sc, ds, &teacher, [&](const md::IterationReport& r) {
        ++iterations;
        if (!(r.centers->matrix().array() == teacher.centers.matrix().array()).all()) {
          ++mismatches;
        }
      });
  const bool final_equal =
      (student.centers.matrix().array() == teacher.centers.matrix().array()).all();
  return {iterations == 500 && mismatches == 0 && final_equal,
          std::to_string(iterations) + " iterations observed, " + std::to_string(mismatches) +
              " with differing centers, final checkpoint " +
              (final_equal ? "bit-identical" : "differs")};
}

// ---- 5 ----------------------------------------------------------------------

Verdict evaluation_oracles() {
  bool pass = true;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    md::RngStream rng(md::derive_key(seed, 1005));
    const std::size_t n = 1 + rng.below(300);
    std::vector<double> scores(n);
    std::vector<bool> same(n);
    for (std::size_t k = 0; k < n; ++k) {
      same[k] = rng.uniform() < 0.5;
      scores[k] = std::tanh(rng.normal() + (same[k] ? 0.7 : -0.7));
      if (seed % 4 == 0) scores[k] = std::round(scores[k] * 10.0) / 10.0;
    }
    std::vector<char> flags(same.begin(), same.end());
    const auto r = md::verification_sweep(
        scores,
        std::span<const bool>(reinterpret_cast<const bool*>(flags.data()), flags.size()));
    pass = pass && r.accuracy >= t::grid_sweep_accuracy(scores, same);
  }
  std::size_t instances = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    md::RngStream rng(md::derive_key(seed, 1006));
    const auto n_probe = static_cast<Eigen::Index>(1 + rng.below(25));
    const auto n_dis = static_cast<Eigen::Index>(rng.below(101));
    const Eigen::Index dim = 2 + static_cast<Eigen::Index>(rng.below(8));
    const Matrix probes = t::random_unit_rows(n_probe, dim, rng);
    Matrix gallery = probes + 0.7 * t::random_matrix(n_probe, dim, rng);
    for (Eigen::Index i = 0; i < n_probe; ++i) gallery.row(i).normalize();
    const Matrix distractors = t::random_unit_rows(n_dis, dim, rng);
    pass = pass && md::rank1_from_embeddings(probes, gallery, distractors) ==
                       t::brute_force_rank1(probes, gallery, distractors);
    ++instances;
  }
  return {pass, "50 sweep protocols vs 1001-point grid; " + std::to_string(instances) +
                    " rank-1 instances vs brute force (exact)"};
}

// ---- 6 ----------------------------------------------------------------------

struct Summary {
  double verification = 0.0;
  double rank1 = 0.0;
};

std::map<std::string, Summary> read_summary(const std::string& path) {
  std::map<std::string, Summary> out;
  std::istringstream in(t::slurp(path));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 6) continue;
    out[f[0]] = {std::stod(f[2]), std::stod(f[4])};
  }
  return out;
}

std::vector<Verdict> ordering(const t::TempDir& dir, const std::string& data) {
  const std::string log = dir.file("compare.log");
  const int rc = run_cli("compare --data " + data + " --seeds 5 --out " +
                             dir.file("compare.csv") + " --workdir " + dir.file("runs"),
                         log);
  std::fputs(t::slurp(log).c_str(), stdout);
  if (rc != 0) {
    const Verdict v{false, "compare exited with " + std::to_string(rc)};
    return {v, v, v};
  }
  const auto s = read_summary(dir.file("compare.csv.summary.csv"));
  const Summary teacher = s.at("teacher");
  std::string best_student;
  double best = -1.0;
  for (const auto& [name, row] : s) {
    if (name != "teacher" && row.rank1 > best) {
      best = row.rank1;
      best_student = name;
    }
  }
  const Summary margin = s.at("margin");
  const Summary arcface = s.at("arcface");
  return {
      {teacher.rank1 > best,
       fmt("teacher mean rank-1 %.4f vs best student ", teacher.rank1) + best_student +
           fmt(" %.4f (strict >)", best)},
      {margin.rank1 >= arcface.rank1,
       fmt("margin mean rank-1 %.4f vs arcface %.4f (>=)", margin.rank1, arcface.rank1)},
      {margin.verification >= arcface.verification,
       fmt("margin mean verification %.4f vs arcface %.4f (>=)", margin.verification,
           arcface.verification)},
  };
}

// ---- 7 ----------------------------------------------------------------------

Verdict determinism(const t::TempDir& dir, const std::string& data) {
  const std::string log = dir.file("determinism.log");
  const std::string quick = " --iterations 300 --milestones 150 250";
  const std::vector<std::pair<std::string, std::vector<std::string>>> commands = {
      {"gen-data --classes 16 --per-class 40 --dim 32 --noise 0.3 --seed 7 --out {}d.mdds",
       {"d.mdds"}},
      {"train-teacher --data " + data + quick + " --out {}t.mdck --metrics {}t.jsonl",
       {"t.mdck", "t.jsonl"}},
      {"distill --method arcface --data " + data + quick + " --out {}s0.mdck --metrics {}s0.jsonl",
       {"s0.mdck", "s0.jsonl"}},
      {"distill --method margin --teacher {T} --data " + data + quick +
           " --out {}s1.mdck --metrics {}s1.jsonl",
       {"s1.mdck", "s1.jsonl"}},
      {"distill --method triplet-l2 --teacher {T} --data " + data + quick + " --out {}s2.mdck",
       {"s2.mdck"}},
      {"distill --method triplet-cos --teacher {T} --data " + data + quick + " --out {}s3.mdck",
       {"s3.mdck"}},
      {"distill --method angular --teacher {T} --data " + data + quick + " --out {}s4.mdck",
       {"s4.mdck"}},
      {"distill --method temp-kd --teacher {T} --data " + data + quick + " --out {}s5.mdck",
       {"s5.mdck"}},
      {"eval --checkpoint {T} --data " + data + " --out-json {}e.json --out-csv {}e.csv",
       {"e.json", "e.csv"}},
      {"compare --seeds 2 --data {}d.mdds --iterations 100 --milestones 50 --out {}c.csv "
       "--workdir {}w",
       {"c.csv", "c.csv.summary.csv", "w/seed1_teacher.mdck", "w/seed2_margin.mdck",
        "w/seed2_temp-kd.json"}},
  };
  const auto expand = [&](std::string s, const std::string& prefix) {
    for (std::size_t p; (p = s.find("{}")) != std::string::npos;) s.replace(p, 2, prefix);
    for (std::size_t p; (p = s.find("{T}")) != std::string::npos;) {
      s.replace(p, 3, dir.file("a_t.mdck"));
    }
    return s;
  };
  std::size_t files = 0;
  for (const auto& [cmd, outputs] : commands) {
    for (const char* run : {"a_", "b_"}) {
      if (run_cli(expand(cmd, dir.file(run)), log) != 0) {
        return {false, "command failed: " + expand(cmd, dir.file(run))};
      }
    }
    for (const auto& f : outputs) {
      const std::string a = t::slurp(dir.file("a_" + f));
      if (a.empty() || a != t::slurp(dir.file("b_" + f))) {
        return {false, "output differs between runs: " + f};
      }
      ++files;
    }
  }
  return {true, std::to_string(commands.size()) + " commands run twice, " +
                    std::to_string(files) + " output files byte-identical"};
}

// ---- 8 ----------------------------------------------------------------------

Verdict self_distillation(const md::Dataset& ds) {
  const auto tc = md::TrainConfig::teacher_preset();
  const md::Checkpoint teacher = md::train_teacher(tc, ds);
  auto sc = md::TrainConfig::student_preset(md::Method::kMarginDistillation);
  sc.hidden = tc.hidden;
  sc.embedding_dim = tc.embedding_dim;
  const md::Checkpoint student = md::distill_student(sc, ds, &teacher);
  const md::ProtocolCapacity cap = md::protocol_capacity(ds);
  const auto pairs = md::build_verification_pairs(
      ds, std::min(md::kDefaultPairsPerKind, cap.positive_pairs),
      std::min(md::kDefaultPairsPerKind, cap.negative_pairs), 0);
  const auto tv = md::verification_accuracy(teacher, ds, pairs).accuracy;
  const auto sv = md::verification_accuracy(student, ds, pairs).accuracy;
  const double gap_pp = 100.0 * std::abs(tv - sv);
  return {gap_pp <= 0.5,
          fmt("teacher verification %.4f, self-distilled student %.4f, gap %.3f pp (<= 0.5)", tv,
              sv, gap_pp)};
}

}  // namespace

int main(int argc, char** argv) {
  // Optional arguments select criteria by number, e.g. `acceptance 1 4`.
  const std::vector<std::string> only(argv + 1, argv + argc);
  const auto wanted = [&](const char* id) {
    return only.empty() || std::find(only.begin(), only.end(), id) != only.end();
  };
  const auto start = std::chrono::steady_clock::now();
  t::TempDir dir;
  const std::string data = dir.file("desk.mdds");
  if (run_cli("gen-data --classes 64 --per-class 200 --dim 128 --noise 0.3 --seed 1 --out " +
                  data,
              dir.file("gen.log")) != 0) {
    std::puts("FAIL could not generate the desk dataset");
    return 1;
  }
  const md::Dataset ds = md::dataset_load(data);

  int failures = 0;
  const auto report = [&](const char* id, const char* name, const Verdict& v, double seconds) {
    failures += v.pass ? 0 : 1;
    std::printf("%s criterion %s %s: %s [%.1fs]\n", v.pass ? "PASS" : "FAIL", id, name,
                v.detail.c_str(), seconds);
    std::fflush(stdout);
  };
  const auto timed = [&](const char* id, const char* name, const std::function<Verdict()>& f) {
    if (!wanted(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = f();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    report(id, name, v,
           std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  };

  timed("1", "formula reductions", formula_reductions);
  timed("2", "gradient suite", gradient_suite);
  timed("3", "margin law", margin_law);
  timed("4", "frozen centers", [&] { return frozen_centers(ds); });
  timed("5", "evaluation oracles", evaluation_oracles);
  if (wanted("6")) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<Verdict> v;
    try {
      v = ordering(dir, data);
    } catch (const std::exception& e) {
      const Verdict bad{false, std::string("error: ") + e.what()};
      v = {bad, bad, bad};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report("6a", "ordering, teacher above students", v[0], secs);
    report("6b", "ordering, margin rank-1 vs arcface", v[1], 0.0);
    report("6c", "ordering, margin verification vs arcface", v[2], 0.0);
  }
  timed("7", "determinism", [&] { return determinism(dir, data); });
  timed("8", "self-distillation", [&] { return self_distillation(ds); });

  std::printf("%d criterion line(s) failed; total %.1fs\n", failures,
              std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  return failures == 0 ? 0 : 1;
}
