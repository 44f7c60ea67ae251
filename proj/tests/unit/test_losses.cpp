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

#include <cmath>
#include <numbers>
#include <vector>

#include "errors.hpp"
#include "losses.hpp"
#include "rng.hpp"
#include "support/oracles.hpp"

namespace {

using md::CosineLogits;
using md::ErrorCode;
using md::MarginSpec;
using md::Matrix;
namespace t = md::testing;

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const md::Error& e) {
    return e.code();
  }
  FAIL("expected md::Error");
  return ErrorCode::kZeroNorm;
}

// Random cosines in (-0.95, 0.95), away from the clamp.
Matrix random_cos(Eigen::Index n, Eigen::Index classes, md::RngStream& rng) {
  Matrix c(n, classes);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < classes; ++j) c(i, j) = rng.uniform(-0.95, 0.95);
  }
  return c;
}

// Logits from random unit embeddings and centers (N=8, n=5, D=16).
Matrix embedding_cos(md::RngStream& rng) {
  const Matrix x = t::random_unit_rows(8, 16, rng);
  const Matrix w = t::random_unit_cols(16, 5, rng);
  return md::cosine_logits(md::EmbeddingBatch(x), md::ClassCenters(w)).matrix();
}

void check_probabilities(const md::LossOutput& out) {
  for (Eigen::Index i = 0; i < out.probabilities.rows(); ++i) {
    CHECK(std::abs(out.probabilities.row(i).sum() - 1.0) < 1e-9);
  }
  CHECK(out.value >= 0.0);
}

TEST_CASE("MarginSpec presets are exact") {
  const auto sf = MarginSpec::sphereface();
  const auto cf = MarginSpec::cosface();
  const auto af = MarginSpec::arcface();
  CHECK((sf.m1 == 4.0 && sf.m2 == 0.0 && sf.m3 == 0.0 && sf.s == 64.0));
  CHECK((cf.m1 == 1.0 && cf.m2 == 0.0 && cf.m3 == 0.35 && cf.s == 64.0));
  CHECK((af.m1 == 1.0 && af.m2 == 0.5 && af.m3 == 0.0 && af.s == 64.0));
  CHECK(code_of([] { MarginSpec{0.5, 0.0, 0.0, 64.0}.validate(); }) ==
        ErrorCode::kInvalidConfig);
  CHECK(code_of([] { MarginSpec{1.0, 2.0, 0.0, 64.0}.validate(); }) ==
        ErrorCode::kInvalidConfig);
  CHECK(code_of([] { MarginSpec{1.0, 0.0, 1.0, 64.0}.validate(); }) ==
        ErrorCode::kInvalidConfig);
  CHECK(code_of([] { MarginSpec{1.0, 0.0, 0.0, 0.0}.validate(); }) ==
        ErrorCode::kInvalidConfig);
}

TEST_CASE("unified_margin_loss examples") {
  Matrix c(1, 2);
  c << 0.5, 0.5;
  const std::vector<int> y{0};
  const auto plain = md::unified_margin_loss(CosineLogits(c), y, {1.0, 0.0, 0.0, 1.0});
  CHECK(plain.value == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Matrix r(1, 2);
  r << 1.0, 0.0;
  const auto arc = md::unified_margin_loss(CosineLogits(r), y, MarginSpec::arcface());
  const long double expected = std::log1p(std::exp(-64.0L * std::cos(0.5L)));
  CHECK(std::abs(arc.value - static_cast<double>(expected)) <= 1e-12 * static_cast<double>(expected));
  CHECK(std::log(arc.value) == doctest::Approx(-56.165).epsilon(1e-5));
}

TEST_CASE("presets match specialized formulas") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    md::RngStream rng(md::derive_key(seed, 10));
    const Matrix c = embedding_cos(rng);
    const std::vector<int> y = t::random_labels(8, 5, rng);
    const CosineLogits logits(c);
    const auto sf = md::unified_margin_loss(logits, y, MarginSpec::sphereface());
    const auto cf = md::unified_margin_loss(logits, y, MarginSpec::cosface());
    const auto af = md::unified_margin_loss(logits, y, MarginSpec::arcface());
    CHECK(std::abs(sf.value - t::sphereface_oracle(c, y, 64.0)) < 1e-9);
    CHECK(std::abs(cf.value - t::cosface_oracle(c, y, 64.0)) < 1e-9);
    CHECK(std::abs(af.value - t::arcface_oracle(c, y, 64.0)) < 1e-9);
    check_probabilities(sf);
    check_probabilities(cf);
    check_probabilities(af);
  }
}

TEST_CASE("zero margins reduce to softmax cross-entropy") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    md::RngStream rng(md::derive_key(seed, 11));
    const Matrix c = random_cos(6, 7, rng);
    const std::vector<int> y = t::random_labels(6, 7, rng);
    const double s = rng.uniform(1.0, 64.0);
    const auto out = md::unified_margin_loss(CosineLogits(c), y, {1.0, 0.0, 0.0, s});
    CHECK(std::abs(out.value - t::plain_softmax_ce(c, y, s)) < 1e-9);

    md::PerSampleMargins zero;
    zero.margins.assign(6, 0.0);
    const auto md0 = md::margin_distillation_loss(CosineLogits(c), y, zero, s);
    CHECK(std::abs(md0.value - t::plain_softmax_ce(c, y, s)) < 1e-9);
  }
}

TEST_CASE("loss grows strictly with the additive angular margin") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    md::RngStream rng(md::derive_key(seed, 12));
    const Matrix c = random_cos(5, 4, rng);
    const std::vector<int> y = t::random_labels(5, 4, rng);
    double max_theta = 0.0;
    for (Eigen::Index i = 0; i < 5; ++i) {
      max_theta = std::max(max_theta, std::acos(c(i, y[static_cast<std::size_t>(i)])));
    }
    double prev = md::unified_margin_loss(CosineLogits(c), y, {1.0, 0.0, 0.0, 8.0}).value;
    for (double m = 0.05; m < std::numbers::pi / 2; m += 0.05) {
      if (max_theta + m >= std::numbers::pi) break;
      const double v = md::unified_margin_loss(CosineLogits(c), y, {1.0, m, 0.0, 8.0}).value;
      CHECK(v > prev);
      prev = v;
    }
  }
}

TEST_CASE("unified_margin_loss errors") {
  Matrix c = Matrix::Zero(2, 3);
  const std::vector<int> bad{0, 3};
  CHECK(code_of([&] { md::unified_margin_loss(CosineLogits(c), bad, MarginSpec::arcface()); }) ==
        ErrorCode::kLabelOutOfRange);
  const std::vector<int> negative{-1, 0};
  CHECK(code_of([&] {
          md::unified_margin_loss(CosineLogits(c), negative, MarginSpec::arcface());
        }) == ErrorCode::kLabelOutOfRange);
  const std::vector<int> short_labels{0};
  CHECK(code_of([&] {
          md::unified_margin_loss(CosineLogits(c), short_labels, MarginSpec::arcface());
        }) == ErrorCode::kDimensionMismatch);
}

TEST_CASE("theta saturation clamps the target logit") {
  Matrix c(1, 2);
  c << -0.99, 0.0;
  const std::vector<int> y{0};
  const auto out = md::unified_margin_loss(CosineLogits(c), y, MarginSpec::arcface(2.0));
  // theta + 0.5 > pi: target logit is s * cos(pi) and its gradient is 0.
  CHECK(out.grad_logits(0, 0) == 0.0);
  const double expected = std::log(std::exp(-2.0) + std::exp(0.0)) + 2.0;
  CHECK(out.value == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("per_sample_margins examples and bounds") {
  const std::vector<double> a{0.9, 0.45, 0.0, -0.3};
  const auto m = md::per_sample_margins(a, 0.2, 0.5);
  CHECK(m.a_max == 0.9);
  CHECK(m.margins[0] == 0.5);
  CHECK(m.margins[1] == doctest::Approx(0.35).epsilon(1e-15));
  CHECK(m.margins[2] == 0.2);
  CHECK(m.margins[3] == 0.2);
  CHECK(m.teacher_cos[3] == 0.0);

  const std::vector<double> flat{-0.5, 0.0, 5e-8};
  const auto low = md::per_sample_margins(flat, 0.2, 0.5);
  for (double v : low.margins) CHECK(v == 0.2);

  const std::vector<double> equal(5, 0.7);
  for (double v : md::per_sample_margins(equal).margins) CHECK(v == 0.5);

  const std::vector<double> none;
  CHECK(code_of([&] { md::per_sample_margins(none); }) == ErrorCode::kEmptyBatch);
  CHECK(code_of([&] { md::per_sample_margins(a, 0.6, 0.5); }) == ErrorCode::kInvalidConfig);

  const auto global = md::per_sample_margins(a, 0.2, 0.5, 1.8);
  CHECK(global.a_max == 1.8);
  CHECK(global.margins[0] == doctest::Approx(0.35).epsilon(1e-15));
}

TEST_CASE("per_sample_margins property: bounds, order, endpoints") {
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    md::RngStream rng(md::derive_key(seed, 13));
    const std::size_t n = 1 + rng.below(64);
    std::vector<double> a(n);
    for (auto& v : a) v = rng.uniform(-1.0, 1.0);
    const auto m = md::per_sample_margins(a, 0.2, 0.5);
    double a_max = 0.0;
    for (double v : a) a_max = std::max(a_max, v);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(m.margins[i] >= 0.2);
      CHECK(m.margins[i] <= 0.5);
      if (a_max >= 1e-7 && a[i] == a_max) CHECK(m.margins[i] == 0.5);
      if (a[i] <= 0.0) CHECK(m.margins[i] == 0.2);
      for (std::size_t j = 0; j < n; ++j) {
        if (a[i] <= a[j]) CHECK(m.margins[i] <= m.margins[j]);
      }
    }
  }
}

TEST_CASE("constant margins are bit-equal to the fixed-margin loss") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    md::RngStream rng(md::derive_key(seed, 14));
    const Matrix c = embedding_cos(rng);
    const std::vector<int> y = t::random_labels(8, 5, rng);
    const double m = rng.uniform(0.0, 1.5);
    md::PerSampleMargins pm;
    pm.margins.assign(8, m);
    const auto a = md::margin_distillation_loss(CosineLogits(c), y, pm, 64.0);
    const auto b = md::unified_margin_loss(CosineLogits(c), y, {1.0, m, 0.0, 64.0});
    CHECK(a.value == b.value);
    CHECK(a.grad_logits == b.grad_logits);
    CHECK(a.probabilities == b.probabilities);
  }
  const std::vector<double> equal(8, 0.3);
  const auto pm = md::per_sample_margins(equal);
  md::RngStream rng(md::derive_key(1, 15));
  const Matrix c = embedding_cos(rng);
  const std::vector<int> y = t::random_labels(8, 5, rng);
  CHECK(md::margin_distillation_loss(CosineLogits(c), y, pm, 64.0).value ==
        md::unified_margin_loss(CosineLogits(c), y, MarginSpec::arcface()).value);
}

TEST_CASE("triplet distillation examples") {
  Matrix a(1, 2), p(1, 2), q(1, 2);
  a << 1.0, 0.0;
  p << 1.0, 0.0;
  q << -1.0, 0.0;
  const md::TripletBatch s{a, p, q};
  for (double m_max : {0.2, 0.35, 0.5}) {
    const auto out = md::triplet_distillation_loss(s, s, 0.2, m_max, md::TripletMetric::kL2);
    CHECK(out.value == 0.0);
  }
  CHECK(md::triplet_margin(0.0, 0.2, 0.5) == 0.2);
  CHECK(md::triplet_margin(-1.0, 0.2, 0.5) == 0.2);
  CHECK(md::triplet_margin(0.1, 0.2, 0.5) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(md::triplet_margin(3.0, 0.2, 0.5) == 0.5);

  // Teacher with zero gap: the margin floor applies.
  const md::TripletBatch teacher{a, a, a};
  const md::TripletBatch student{a, q, a};
  const auto l2 = md::triplet_distillation_loss(student, teacher, 0.2, 0.5,
                                                md::TripletMetric::kL2);
  CHECK(l2.margins[0] == 0.2);
  CHECK(l2.value == doctest::Approx(4.0 + 0.2).epsilon(1e-15));
  const auto cs = md::triplet_distillation_loss(student, teacher, 0.2, 0.5,
                                                md::TripletMetric::kCos);
  CHECK(cs.value == doctest::Approx(2.0 + 0.2).epsilon(1e-15));

  Matrix wide(1, 3);
  wide << 1.0, 0.0, 0.0;
  CHECK(code_of([&] {
          md::triplet_distillation_loss({a, wide, a}, teacher, 0.2, 0.5,
                                        md::TripletMetric::kL2);
        }) == ErrorCode::kDimensionMismatch);
}

TEST_CASE("angular distillation examples") {
  Matrix s(1, 2), o(1, 2);
  s << 0.6, 0.8;
  o << -0.8, 0.6;
  CHECK(md::angular_distillation_loss(s, s).value == doctest::Approx(0.0));
  CHECK(md::angular_distillation_loss(s, -s).value == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(md::angular_distillation_loss(s, o).value == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(code_of([&] { md::angular_distillation_loss(s, Matrix::Ones(1, 3)); }) ==
        ErrorCode::kDimensionMismatch);
  md::RngStream rng(md::derive_key(2, 16));
  for (int k = 0; k < 100; ++k) {
    const Matrix a = t::random_matrix(4, 5, rng);
    const Matrix b = t::random_matrix(4, 5, rng);
    const double v = md::angular_distillation_loss(a, b).value;
    CHECK(v >= 0.0);
    CHECK(v <= 2.0);
  }
}

TEST_CASE("temperature KD examples") {
  md::RngStream rng(md::derive_key(3, 17));
  const Matrix c = embedding_cos(rng);
  const std::vector<int> y = t::random_labels(8, 5, rng);
  const auto same =
      md::temperature_kd_loss(CosineLogits(c), CosineLogits(c), y, MarginSpec::arcface(), 4.0);
  CHECK(same.value == 0.0);
  CHECK(same.grad_logits.cwiseAbs().maxCoeff() == 0.0);
  CHECK(code_of([&] {
          md::temperature_kd_loss(CosineLogits(c), CosineLogits(c), y, MarginSpec::arcface(), 0.0);
        }) == ErrorCode::kNonPositiveTemperature);
  CHECK(code_of([&] {
          md::temperature_kd_loss(CosineLogits(c), CosineLogits(c.topRows(4)), y,
                                  MarginSpec::arcface(), 4.0);
        }) == ErrorCode::kDimensionMismatch);
}

TEST_CASE("temperature KD flattens with T") {
  // A fixed pair of distinct rows. The divergence between the softened
  // distributions shrinks as T grows. The T^2-scaled value grows on this
  // pair, so the check is on value / T^2.
  Matrix student(1, 4), teacher(1, 4);
  student << 0.30, 0.10, -0.20, 0.05;
  teacher << 0.60, -0.10, 0.00, 0.20;
  const std::vector<int> y{0};
  double prev = INFINITY;
  for (double temp : {1.0, 2.0, 4.0, 8.0}) {
    const double v = md::temperature_kd_loss(CosineLogits(student), CosineLogits(teacher), y,
                                             MarginSpec::arcface(), temp)
                         .value;
    const double kl = v / (temp * temp);
    CHECK(kl < prev);
    prev = kl;
  }
}

TEST_CASE("hard-label weight adds the margin softmax term") {
  md::RngStream rng(md::derive_key(4, 18));
  const Matrix cs = embedding_cos(rng);
  const Matrix ct = embedding_cos(rng);
  const std::vector<int> y = t::random_labels(8, 5, rng);
  const auto spec = MarginSpec::arcface();
  const auto soft = md::temperature_kd_loss(CosineLogits(cs), CosineLogits(ct), y, spec, 4.0);
  const auto mixed =
      md::temperature_kd_loss(CosineLogits(cs), CosineLogits(ct), y, spec, 4.0, 0.25);
  const auto hard = md::unified_margin_loss(CosineLogits(cs), y, spec);
  CHECK(mixed.value == doctest::Approx(soft.value + 0.25 * hard.value).epsilon(1e-12));
}

// ---- finite differences --------------------------------------------------

constexpr int kSeeds = 20;

TEST_CASE("gradient: unified margin loss, all presets") {
  for (const MarginSpec& spec :
       {MarginSpec::sphereface(), MarginSpec::cosface(), MarginSpec::arcface(),
        MarginSpec{1.3, 0.2, 0.1, 16.0}}) {
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      md::RngStream rng(md::derive_key(seed, 20));
      Matrix c = embedding_cos(rng);
      const std::vector<int> y = t::random_labels(8, 5, rng);
      const auto out = md::unified_margin_loss(CosineLogits(c), y, spec);
      const Matrix num = t::numeric_gradient(
          c, [&] { return md::unified_margin_loss(CosineLogits(c), y, spec).value; });
      CHECK(t::max_relative_error(out.grad_logits, num) < 1e-4);
    }
  }
}

TEST_CASE("gradient: margin distillation loss with mixed margins") {
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    md::RngStream rng(md::derive_key(seed, 21));
    Matrix c = embedding_cos(rng);
    const std::vector<int> y = t::random_labels(8, 5, rng);
    std::vector<double> a(8);
    for (auto& v : a) v = rng.uniform(-0.2, 1.0);
    const auto pm = md::per_sample_margins(a);
    const auto out = md::margin_distillation_loss(CosineLogits(c), y, pm, 64.0);
    const Matrix num = t::numeric_gradient(
        c, [&] { return md::margin_distillation_loss(CosineLogits(c), y, pm, 64.0).value; });
    CHECK(t::max_relative_error(out.grad_logits, num) < 1e-4);
  }
}

TEST_CASE("gradient: triplet distillation, both metrics") {
  for (md::TripletMetric metric : {md::TripletMetric::kL2, md::TripletMetric::kCos}) {
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      md::RngStream rng(md::derive_key(seed, 22));
      md::TripletBatch s{t::random_unit_rows(8, 16, rng), t::random_unit_rows(8, 16, rng),
                         t::random_unit_rows(8, 16, rng)};
      const md::TripletBatch teacher{t::random_unit_rows(8, 16, rng),
                                     t::random_unit_rows(8, 16, rng),
                                     t::random_unit_rows(8, 16, rng)};
      // Push the student so that most hinges are active.
      s.negative = 0.5 * s.negative + 0.5 * s.anchor;
      const auto out = md::triplet_distillation_loss(s, teacher, 0.2, 0.5, metric);
      const auto f = [&] {
        return md::triplet_distillation_loss(s, teacher, 0.2, 0.5, metric).value;
      };
      CHECK(t::max_relative_error(out.grad_anchor, t::numeric_gradient(s.anchor, f)) < 1e-4);
      CHECK(t::max_relative_error(out.grad_positive, t::numeric_gradient(s.positive, f)) < 1e-4);
      CHECK(t::max_relative_error(out.grad_negative, t::numeric_gradient(s.negative, f)) < 1e-4);
    }
  }
}

TEST_CASE("gradient: angular distillation") {
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    md::RngStream rng(md::derive_key(seed, 23));
    Matrix s = t::random_matrix(8, 16, rng);
    const Matrix teacher = t::random_unit_rows(8, 16, rng);
    const auto out = md::angular_distillation_loss(s, teacher);
    const Matrix num =
        t::numeric_gradient(s, [&] { return md::angular_distillation_loss(s, teacher).value; });
    CHECK(t::max_relative_error(out.grad, num) < 1e-4);
  }
}

TEST_CASE("gradient: temperature KD") {
  for (double hard : {0.0, 0.5}) {
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      md::RngStream rng(md::derive_key(seed, 24));
      Matrix cs = embedding_cos(rng);
      const Matrix ct = embedding_cos(rng);
      const std::vector<int> y = t::random_labels(8, 5, rng);
      const auto spec = MarginSpec::arcface();
      const auto out =
          md::temperature_kd_loss(CosineLogits(cs), CosineLogits(ct), y, spec, 4.0, hard);
      const Matrix num = t::numeric_gradient(cs, [&] {
        return md::temperature_kd_loss(CosineLogits(cs), CosineLogits(ct), y, spec, 4.0, hard)
            .value;
      });
      CHECK(t::max_relative_error(out.grad_logits, num) < 1e-4);
    }
  }
}

TEST_CASE("gradient: full chain to pre-normalization embeddings and centers") {
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    md::RngStream rng(md::derive_key(seed, 25));
    Matrix x_raw = t::random_matrix(4, 8, rng, 1.5);
    Matrix w_raw = t::random_matrix(8, 3, rng, 0.7);
    const std::vector<int> y = t::random_labels(4, 3, rng);
    const auto spec = MarginSpec::arcface(16.0);
    const auto loss = [&] {
      const auto x = md::EmbeddingBatch::from_raw(x_raw);
      const auto w = md::ClassCenters::from_raw(w_raw);
      return md::unified_margin_loss(md::cosine_logits(x, w), y, spec).value;
    };
    std::vector<double> xn, wn;
    const md::EmbeddingBatch x(md::normalize_rows(x_raw, &xn));
    const md::ClassCenters w(md::normalize_cols(w_raw, &wn), true);
    const auto out = md::unified_margin_loss(md::cosine_logits(x, w), y, spec);
    const auto g = md::backprop_to_embeddings(out.grad_logits, x, w, xn, wn);
    CHECK_FALSE(g.grad_w_applicable);
    CHECK(t::max_relative_error(g.grad_x, t::numeric_gradient(x_raw, loss)) < 1e-4);
    CHECK(t::max_relative_error(g.grad_w, t::numeric_gradient(w_raw, loss)) < 1e-4);
  }
}

TEST_CASE("backprop_to_embeddings edge cases") {
  md::RngStream rng(md::derive_key(6, 26));
  const md::EmbeddingBatch x(t::random_unit_rows(4, 8, rng));
  const md::ClassCenters w(t::random_unit_cols(8, 3, rng));
  const auto zero = md::backprop_to_embeddings(Matrix::Zero(4, 3), x, w);
  CHECK(zero.grad_x.cwiseAbs().maxCoeff() == 0.0);
  CHECK(zero.grad_w.cwiseAbs().maxCoeff() == 0.0);
  CHECK(zero.grad_w_applicable);

  const md::EmbeddingBatch one(t::random_unit_rows(1, 8, rng));
  const md::ClassCenters c(t::random_unit_cols(8, 1, rng));
  const auto g = md::backprop_to_embeddings(Matrix::Ones(1, 1), one, c);
  CHECK(std::abs(g.grad_x.row(0).dot(one.matrix().row(0))) < 1e-10);
  CHECK(std::abs(g.grad_w.col(0).dot(c.matrix().col(0))) < 1e-10);

  CHECK(code_of([&] { md::backprop_to_embeddings(Matrix::Zero(3, 3), x, w); }) ==
        ErrorCode::kDimensionMismatch);
}

}  // namespace
