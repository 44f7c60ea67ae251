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

#include <optional>
#include <span>
#include <vector>

#include "geometry.hpp"

namespace md {

// Margin-based softmax parameters. The target logit of sample i becomes
// s * (cos(m1 * theta_y + m2) - m3); every other logit is s * cos(theta_j).
struct MarginSpec {
  double m1 = 1.0;  // multiplicative angular margin
  double m2 = 0.5;  // additive angular margin, radians
  double m3 = 0.0;  // additive cosine margin
  double s = 64.0;  // logit scale

  void validate() const;

  static MarginSpec sphereface(double s = 64.0) { return {4.0, 0.0, 0.0, s}; }
  static MarginSpec cosface(double s = 64.0) { return {1.0, 0.0, 0.35, s}; }
  static MarginSpec arcface(double s = 64.0) { return {1.0, 0.5, 0.0, s}; }
};

inline constexpr double kDefaultMarginMin = 0.2;
inline constexpr double kDefaultMarginMax = 0.5;

// Teacher-driven margins. a_i is the teacher cosine between sample i and its
// own class center; margins grow linearly from m_min (a_i = 0) to m_max
// (a_i = a_max).
struct PerSampleMargins {
  std::vector<double> margins;
  std::vector<double> teacher_cos;  // after clamping below at 0
  double a_max = 0.0;
  double m_min = kDefaultMarginMin;
  double m_max = kDefaultMarginMax;
};

struct LossOutput {
  double value = 0.0;
  Matrix grad_logits;    // dL / d cos(theta_ij)
  Matrix probabilities;  // softmax rows used by the forward pass
};

LossOutput unified_margin_loss(const CosineLogits& logits,
                               std::span<const int> labels,
                               const MarginSpec& spec);

// With global_a_max set, that value replaces the batch maximum (ablation mode).
PerSampleMargins per_sample_margins(std::span<const double> teacher_cos,
                                    double m_min = kDefaultMarginMin,
                                    double m_max = kDefaultMarginMax,
                                    std::optional<double> global_a_max = {});

// ArcFace with the additive angular margin replaced row-wise by m_i.
LossOutput margin_distillation_loss(const CosineLogits& logits,
                                    std::span<const int> labels,
                                    const PerSampleMargins& margins, double s);

enum class TripletMetric { kL2, kCos };

// Row k of anchor/positive/negative forms one triplet.
struct TripletBatch {
  Matrix anchor;
  Matrix positive;
  Matrix negative;
};

struct TripletLossOutput {
  double value = 0.0;
  Matrix grad_anchor;
  Matrix grad_positive;
  Matrix grad_negative;
  std::vector<double> margins;
};

// Squared L2 distance, or 1 - cosine for kCos.
double triplet_distance(const Eigen::Ref<const Eigen::RowVectorXd>& u,
                        const Eigen::Ref<const Eigen::RowVectorXd>& v,
                        TripletMetric metric);

// Dynamic margin from the teacher's distance gap d(a, n) - d(a, p).
double triplet_margin(double teacher_gap, double m_min, double m_max);

TripletLossOutput triplet_distillation_loss(const TripletBatch& student,
                                            const TripletBatch& teacher,
                                            double m_min, double m_max,
                                            TripletMetric metric);

struct EmbeddingLossOutput {
  double value = 0.0;
  Matrix grad;  // with respect to the student rows
};

// Mean of 1 - cos(student_i, teacher_i).
EmbeddingLossOutput angular_distillation_loss(const Matrix& student,
                                              const Matrix& teacher);

// T^2 * KL(softmax(z_t / T) || softmax(z_s / T)), where z are the
// margin-adjusted scaled logits, plus hard_weight times the student's margin
// softmax loss. grad_logits is with respect to the student logits.
LossOutput temperature_kd_loss(const CosineLogits& student_logits,
                               const CosineLogits& teacher_logits,
                               std::span<const int> labels,
                               const MarginSpec& spec, double temperature,
                               double hard_weight = 0.0);

struct EmbeddingGrads {
  Matrix grad_x;  // N x D, with respect to pre-normalization rows
  Matrix grad_w;  // D x n, with respect to pre-normalization columns
  bool grad_w_applicable = true;  // false when the centers are frozen
};

// Chain rule through logits = X * W and the row/column normalizations.
// Norms default to 1, which yields the tangent-space projection.
EmbeddingGrads backprop_to_embeddings(const Matrix& grad_logits,
                                      const EmbeddingBatch& x,
                                      const ClassCenters& w,
                                      const std::vector<double>& x_norms = {},
                                      const std::vector<double>& w_norms = {});

}  // namespace md
