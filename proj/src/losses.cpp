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

#include "losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "errors.hpp"

namespace md {

namespace {

struct TargetLogit {
  double z = 0.0;
  double dz_dc = 0.0;
};

// s * (cos(min(m1 * acos(c) + m2, pi)) - m3) and its derivative in c. The
// adjusted angle saturates at pi, where the subgradient is taken as 0. At
// |c| = 1 the derivative is evaluated at the clamp boundary.
TargetLogit margin_target(double c, double m1, double m2, double m3, double s) {
  const double phi = m1 * safe_arccos(c) + m2;
  if (phi >= std::numbers::pi) {
    return {s * (-1.0 - m3), 0.0};
  }
  const double hi = 1.0 - kCosineClamp;
  const double cc = std::clamp(c, -hi, hi);
  TargetLogit out;
  out.z = s * (std::cos(phi) - m3);
  out.dz_dc = s * m1 * std::sin(m1 * std::acos(cc) + m2) / std::sqrt(1.0 - cc * cc);
  return out;
}

// -log softmax(z)_y. The log1p branch keeps precision when the target
// dominates the row.
double nll_row(const Eigen::RowVectorXd& z, int y) {
  double top = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < z.size(); ++j) {
    if (j != y) top = std::max(top, z(j) - z(y));
  }
  if (top > 0.0) {
    double sum = std::exp(-top);
    for (Eigen::Index j = 0; j < z.size(); ++j) {
      if (j != y) sum += std::exp(z(j) - z(y) - top);
    }
    return top + std::log(sum);
  }
  double sum = 0.0;
  for (Eigen::Index j = 0; j < z.size(); ++j) {
    if (j != y) sum += std::exp(z(j) - z(y));
  }
  return std::log1p(sum);
}

void check_labels(std::span<const int> labels, Eigen::Index rows,
                  Eigen::Index classes) {
  require(rows >= 1, ErrorCode::kEmptyBatch, "empty batch");
  require(static_cast<Eigen::Index>(labels.size()) == rows,
          ErrorCode::kDimensionMismatch,
          "label count " + std::to_string(labels.size()) + " != batch size " +
              std::to_string(rows));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < classes, ErrorCode::kLabelOutOfRange,
            "label " + std::to_string(labels[i]) + " at row " +
                std::to_string(i) + " outside [0, " + std::to_string(classes) +
                ")");
  }
}

// Builds the margin-adjusted scaled logits of one row. Returns dz_y / dc_y.
double adjusted_row(const Matrix& cos, Eigen::Index i, int label, double m1,
                    double m2, double m3, double s, Eigen::RowVectorXd& z) {
  z = s * cos.row(i);
  const TargetLogit t = margin_target(cos(i, label), m1, m2, m3, s);
  z(label) = t.z;
  return t.dz_dc;
}

// Stable softmax of z / temperature; returns log-sum-exp of z / temperature.
double softmax_row(const Eigen::RowVectorXd& z, double temperature,
                   Eigen::RowVectorXd& p) {
  const double zmax = z.maxCoeff();
  p = ((z.array() - zmax) / temperature).exp().matrix();
  const double sum = p.sum();
  p /= sum;
  return zmax / temperature + std::log(sum);
}

// Shared by the fixed-margin and per-sample-margin paths so that constant
// margins give bit-identical results.
LossOutput margin_softmax(const CosineLogits& logits, std::span<const int> labels,
                          double m1, std::span<const double> m2, double m3,
                          double s) {
  const Matrix& cos = logits.matrix();
  const Eigen::Index n = cos.rows();
  check_labels(labels, n, cos.cols());
  LossOutput out;
  out.grad_logits.resize(n, cos.cols());
  out.probabilities.resize(n, cos.cols());
  const double inv_n = 1.0 / static_cast<double>(n);
  Eigen::RowVectorXd z;
  Eigen::RowVectorXd p;
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    const double dzy =
        adjusted_row(cos, i, y, m1, m2[static_cast<std::size_t>(i)], m3, s, z);
    softmax_row(z, 1.0, p);
    total += nll_row(z, y);
    out.probabilities.row(i) = p;
    Eigen::RowVectorXd g = p;
    g(y) -= 1.0;
    g *= inv_n;
    out.grad_logits.row(i) = g * s;
    out.grad_logits(i, y) = g(y) * dzy;
  }
  out.value = total * inv_n;
  return out;
}

}  // namespace

void MarginSpec::validate() const {
  require(s > 0.0, ErrorCode::kInvalidConfig, "scale s must be positive");
  require(m1 >= 1.0, ErrorCode::kInvalidConfig, "m1 must be >= 1");
  require(m2 >= 0.0 && m2 < std::numbers::pi / 2, ErrorCode::kInvalidConfig,
          "m2 must lie in [0, pi/2)");
  require(m3 >= 0.0 && m3 < 1.0, ErrorCode::kInvalidConfig,
          "m3 must lie in [0, 1)");
}

LossOutput unified_margin_loss(const CosineLogits& logits,
                               std::span<const int> labels,
                               const MarginSpec& spec) {
  spec.validate();
  const std::vector<double> m2(static_cast<std::size_t>(logits.size()), spec.m2);
  return margin_softmax(logits, labels, spec.m1, m2, spec.m3, spec.s);
}

PerSampleMargins per_sample_margins(std::span<const double> teacher_cos,
                                    double m_min, double m_max,
                                    std::optional<double> global_a_max) {
  require(!teacher_cos.empty(), ErrorCode::kEmptyBatch,
          "per_sample_margins on an empty batch");
  require(m_min >= 0.0 && m_min <= m_max, ErrorCode::kInvalidConfig,
          "margins need 0 <= m_min <= m_max");
  PerSampleMargins out;
  out.m_min = m_min;
  out.m_max = m_max;
  out.teacher_cos.reserve(teacher_cos.size());
  double a_max = 0.0;
  for (double a : teacher_cos) {
    const double clamped = std::max(a, 0.0);
    out.teacher_cos.push_back(clamped);
    a_max = std::max(a_max, clamped);
  }
  if (global_a_max) a_max = std::max(*global_a_max, 0.0);
  out.a_max = a_max;
  out.margins.resize(teacher_cos.size(), m_min);
  if (a_max < 1e-7) return out;
  const double slope = (m_max - m_min) / a_max;
  for (std::size_t i = 0; i < out.teacher_cos.size(); ++i) {
    const double a = out.teacher_cos[i];
    out.margins[i] = a >= a_max ? m_max : std::clamp(slope * a + m_min, m_min, m_max);
  }
  return out;
}

LossOutput margin_distillation_loss(const CosineLogits& logits,
                                    std::span<const int> labels,
                                    const PerSampleMargins& margins, double s) {
  require(static_cast<Eigen::Index>(margins.margins.size()) == logits.size(),
          ErrorCode::kDimensionMismatch, "margin count != batch size");
  require(s > 0.0, ErrorCode::kInvalidConfig, "scale s must be positive");
  return margin_softmax(logits, labels, 1.0, margins.margins, 0.0, s);
}

double triplet_distance(const Eigen::Ref<const Eigen::RowVectorXd>& u,
                        const Eigen::Ref<const Eigen::RowVectorXd>& v,
                        TripletMetric metric) {
  if (metric == TripletMetric::kL2) return (u - v).squaredNorm();
  return 1.0 - u.dot(v) / (u.norm() * v.norm());
}

double triplet_margin(double teacher_gap, double m_min, double m_max) {
  return std::clamp(m_min + teacher_gap, m_min, m_max);
}

namespace {

// d distance(u, v) / du.
Eigen::RowVectorXd distance_grad(const Eigen::RowVectorXd& u,
                                 const Eigen::RowVectorXd& v,
                                 TripletMetric metric) {
  if (metric == TripletMetric::kL2) return 2.0 * (u - v);
  const double nu = u.norm();
  const double nv = v.norm();
  const double c = u.dot(v) / (nu * nv);
  return -(v / (nu * nv) - c * u / (nu * nu));
}

}  // namespace

TripletLossOutput triplet_distillation_loss(const TripletBatch& student,
                                            const TripletBatch& teacher,
                                            double m_min, double m_max,
                                            TripletMetric metric) {
  const Eigen::Index n = student.anchor.rows();
  require(n >= 1, ErrorCode::kEmptyBatch, "empty triplet batch");
  const auto same_shape = [](const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols();
  };
  require(same_shape(student.anchor, student.positive) &&
              same_shape(student.anchor, student.negative),
          ErrorCode::kDimensionMismatch, "student triplet shapes differ");
  require(same_shape(teacher.anchor, teacher.positive) &&
              same_shape(teacher.anchor, teacher.negative) &&
              teacher.anchor.rows() == n,
          ErrorCode::kDimensionMismatch, "teacher triplets misaligned");
  require(m_min <= m_max, ErrorCode::kInvalidConfig, "m_min > m_max");

  TripletLossOutput out;
  out.grad_anchor = Matrix::Zero(n, student.anchor.cols());
  out.grad_positive = Matrix::Zero(n, student.anchor.cols());
  out.grad_negative = Matrix::Zero(n, student.anchor.cols());
  out.margins.resize(static_cast<std::size_t>(n));
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double gap =
        triplet_distance(teacher.anchor.row(i), teacher.negative.row(i), metric) -
        triplet_distance(teacher.anchor.row(i), teacher.positive.row(i), metric);
    const double m = triplet_margin(gap, m_min, m_max);
    out.margins[static_cast<std::size_t>(i)] = m;
    const Eigen::RowVectorXd a = student.anchor.row(i);
    const Eigen::RowVectorXd p = student.positive.row(i);
    const Eigen::RowVectorXd q = student.negative.row(i);
    const double hinge = triplet_distance(a, p, metric) -
                         triplet_distance(a, q, metric) + m;
    if (hinge <= 0.0) continue;
    total += hinge;
    out.grad_anchor.row(i) =
        inv_n * (distance_grad(a, p, metric) - distance_grad(a, q, metric));
    out.grad_positive.row(i) = inv_n * distance_grad(p, a, metric);
    out.grad_negative.row(i) = -inv_n * distance_grad(q, a, metric);
  }
  out.value = total * inv_n;
  return out;
}

EmbeddingLossOutput angular_distillation_loss(const Matrix& student,
                                              const Matrix& teacher) {
  require(student.rows() == teacher.rows() && student.cols() == teacher.cols(),
          ErrorCode::kDimensionMismatch,
          "angular distillation needs equal N and D for student and teacher");
  require(student.rows() >= 1, ErrorCode::kEmptyBatch, "empty batch");
  const Eigen::Index n = student.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  EmbeddingLossOutput out;
  out.grad.resize(n, student.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double ns = student.row(i).norm();
    const double nt = teacher.row(i).norm();
    const double c = student.row(i).dot(teacher.row(i)) / (ns * nt);
    total += 1.0 - c;
    out.grad.row(i) =
        -inv_n * (teacher.row(i) / (ns * nt) - c * student.row(i) / (ns * ns));
  }
  out.value = total * inv_n;
  return out;
}

LossOutput temperature_kd_loss(const CosineLogits& student_logits,
                               const CosineLogits& teacher_logits,
                               std::span<const int> labels,
                               const MarginSpec& spec, double temperature,
                               double hard_weight) {
  require(temperature > 0.0, ErrorCode::kNonPositiveTemperature,
          "temperature must be positive");
  spec.validate();
  const Matrix& cs = student_logits.matrix();
  const Matrix& ct = teacher_logits.matrix();
  require(cs.rows() == ct.rows() && cs.cols() == ct.cols(),
          ErrorCode::kDimensionMismatch, "student/teacher logits misaligned");
  const Eigen::Index n = cs.rows();
  check_labels(labels, n, cs.cols());

  LossOutput out;
  out.grad_logits.resize(n, cs.cols());
  out.probabilities.resize(n, cs.cols());
  const double inv_n = 1.0 / static_cast<double>(n);
  const double t2 = temperature * temperature;
  Eigen::RowVectorXd zs;
  Eigen::RowVectorXd zt;
  Eigen::RowVectorXd p;
  Eigen::RowVectorXd q;
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    const double dzy =
        adjusted_row(cs, i, y, spec.m1, spec.m2, spec.m3, spec.s, zs);
    adjusted_row(ct, i, y, spec.m1, spec.m2, spec.m3, spec.s, zt);
    const double lse_s = softmax_row(zs, temperature, p);
    const double lse_t = softmax_row(zt, temperature, q);
    double kl = 0.0;
    for (Eigen::Index j = 0; j < cs.cols(); ++j) {
      if (q(j) < 1e-12) continue;
      const double log_q = zt(j) / temperature - lse_t;
      const double log_p = zs(j) / temperature - lse_s;
      kl += q(j) * (log_q - log_p);
    }
    total += t2 * kl;
    out.probabilities.row(i) = p;
    // d(T^2 KL)/dz_s = T (p - q).
    Eigen::RowVectorXd g = temperature * inv_n * (p - q);
    out.grad_logits.row(i) = g * spec.s;
    out.grad_logits(i, y) = g(y) * dzy;
  }
  out.value = total * inv_n;
  if (hard_weight != 0.0) {
    const LossOutput hard = unified_margin_loss(student_logits, labels, spec);
    out.value += hard_weight * hard.value;
    out.grad_logits += hard_weight * hard.grad_logits;
  }
  return out;
}

EmbeddingGrads backprop_to_embeddings(const Matrix& grad_logits,
                                      const EmbeddingBatch& x,
                                      const ClassCenters& w,
                                      const std::vector<double>& x_norms,
                                      const std::vector<double>& w_norms) {
  require(x.dim() == w.dim(), ErrorCode::kDimensionMismatch,
          "embedding/center dimension mismatch");
  require(grad_logits.rows() == x.size() &&
              grad_logits.cols() == w.num_classes(),
          ErrorCode::kDimensionMismatch, "grad_logits shape mismatch");
  require(x_norms.empty() ||
              static_cast<Eigen::Index>(x_norms.size()) == x.size(),
          ErrorCode::kDimensionMismatch, "x_norms length mismatch");
  require(w_norms.empty() ||
              static_cast<Eigen::Index>(w_norms.size()) == w.num_classes(),
          ErrorCode::kDimensionMismatch, "w_norms length mismatch");
  EmbeddingGrads out;
  const Matrix gx = grad_logits * w.matrix().transpose();
  const Matrix gw = x.matrix().transpose() * grad_logits;
  out.grad_x = normalize_rows_backward(x.matrix(), gx, x_norms);
  out.grad_w = normalize_cols_backward(w.matrix(), gw, w_norms);
  out.grad_w_applicable = !w.frozen();
  return out;
}

}  // namespace md
