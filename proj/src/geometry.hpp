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

#include <Eigen/Dense>

#include <vector>

namespace md {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kZeroNormEpsilon = 1e-12;
inline constexpr double kUnitNormTolerance = 1e-6;
inline constexpr double kCosineClamp = 1e-7;

// Row-wise unit-norm N x D feature vectors.
class EmbeddingBatch {
 public:
  // Rows must already have unit norm; throws kDimensionMismatch otherwise.
  explicit EmbeddingBatch(Matrix data);

  // Normalizes each row; throws kZeroNorm on a degenerate row.
  static EmbeddingBatch from_raw(const Matrix& raw);

  const Matrix& matrix() const noexcept { return data_; }
  Eigen::Index size() const noexcept { return data_.rows(); }
  Eigen::Index dim() const noexcept { return data_.cols(); }

 private:
  Matrix data_;
};

// D x n matrix whose columns are unit-norm class centers.
class ClassCenters {
 public:
  explicit ClassCenters(Matrix data, bool frozen = false);

  static ClassCenters from_raw(const Matrix& raw, bool frozen = false);

  const Matrix& matrix() const noexcept { return data_; }
  Eigen::Index dim() const noexcept { return data_.rows(); }
  Eigen::Index num_classes() const noexcept { return data_.cols(); }

  // A frozen set of centers is never touched by an optimizer.
  bool frozen() const noexcept { return frozen_; }
  void set_frozen(bool frozen) noexcept { frozen_ = frozen; }

 private:
  Matrix data_;
  bool frozen_ = false;
};

// N x n matrix of cos(theta_j) values, every entry in [-1, 1].
class CosineLogits {
 public:
  explicit CosineLogits(Matrix data);

  const Matrix& matrix() const noexcept { return data_; }
  Eigen::Index size() const noexcept { return data_.rows(); }
  Eigen::Index num_classes() const noexcept { return data_.cols(); }

 private:
  Matrix data_;
};

Vector l2_normalize(const Vector& v);

// Entry (i, j) = <X_i, W_j>, clamped to [-1 + 1e-7, 1 - 1e-7].
CosineLogits cosine_logits(const EmbeddingBatch& x, const ClassCenters& w);

double safe_arccos(double c);

// Row/column normalization that also reports the pre-normalization norms,
// which the backward pass needs.
Matrix normalize_rows(const Matrix& raw, std::vector<double>* norms = nullptr);
Matrix normalize_cols(const Matrix& raw, std::vector<double>* norms = nullptr);

// Pulls a gradient with respect to unit rows u_i = v_i / |v_i| back to the raw
// rows v_i: (g_i - <g_i, u_i> u_i) / |v_i|. Missing norms are taken as 1.
Matrix normalize_rows_backward(const Matrix& unit, const Matrix& grad,
                               const std::vector<double>& norms = {});
Matrix normalize_cols_backward(const Matrix& unit, const Matrix& grad,
                               const std::vector<double>& norms = {});

}  // namespace md
