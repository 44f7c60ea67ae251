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

#include "geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "errors.hpp"

namespace md {

namespace {

void check_unit_rows(const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double norm = m.row(i).norm();
    require(std::abs(norm - 1.0) <= kUnitNormTolerance,
            ErrorCode::kDimensionMismatch,
            "embedding row " + std::to_string(i) + " is not unit norm (" +
                std::to_string(norm) + ")");
  }
}

}  // namespace

EmbeddingBatch::EmbeddingBatch(Matrix data) : data_(std::move(data)) {
  require(data_.rows() >= 1, ErrorCode::kEmptyBatch, "embedding batch is empty");
  require(data_.cols() >= 2, ErrorCode::kDimensionMismatch,
          "embedding dimension must be at least 2");
  check_unit_rows(data_);
}

EmbeddingBatch EmbeddingBatch::from_raw(const Matrix& raw) {
  return EmbeddingBatch(normalize_rows(raw));
}

ClassCenters::ClassCenters(Matrix data, bool frozen)
    : data_(std::move(data)), frozen_(frozen) {
  require(data_.rows() >= 2 && data_.cols() >= 1, ErrorCode::kDimensionMismatch,
          "class centers need D >= 2 and n >= 1");
  for (Eigen::Index j = 0; j < data_.cols(); ++j) {
    const double norm = data_.col(j).norm();
    require(std::abs(norm - 1.0) <= kUnitNormTolerance,
            ErrorCode::kDimensionMismatch,
            "class center " + std::to_string(j) + " is not unit norm");
  }
}

ClassCenters ClassCenters::from_raw(const Matrix& raw, bool frozen) {
  return ClassCenters(normalize_cols(raw), frozen);
}

CosineLogits::CosineLogits(Matrix data) : data_(std::move(data)) {
  for (Eigen::Index k = 0; k < data_.size(); ++k) {
    const double c = data_.data()[k];
    require(c >= -1.0 && c <= 1.0, ErrorCode::kDimensionMismatch,
            "cosine logit outside [-1, 1]");
  }
}

Vector l2_normalize(const Vector& v) {
  require(v.size() >= 1, ErrorCode::kDimensionMismatch, "empty vector");
  const double norm = v.norm();
  if (!(norm >= kZeroNormEpsilon)) {
    fail(ErrorCode::kZeroNorm, "vector norm below 1e-12");
  }
  return v / norm;
}

CosineLogits cosine_logits(const EmbeddingBatch& x, const ClassCenters& w) {
  require(x.dim() == w.dim(), ErrorCode::kDimensionMismatch,
          "embedding dimension " + std::to_string(x.dim()) +
              " != center dimension " + std::to_string(w.dim()));
  Matrix logits = x.matrix() * w.matrix();
  const double hi = 1.0 - kCosineClamp;
  logits = logits.cwiseMax(-hi).cwiseMin(hi);
  return CosineLogits(std::move(logits));
}

double safe_arccos(double c) { return std::acos(std::clamp(c, -1.0, 1.0)); }

Matrix normalize_rows(const Matrix& raw, std::vector<double>* norms) {
  Matrix out(raw.rows(), raw.cols());
  if (norms) norms->resize(static_cast<std::size_t>(raw.rows()));
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    const double norm = raw.row(i).norm();
    if (!(norm >= kZeroNormEpsilon)) {
      fail(ErrorCode::kZeroNorm,
           "row " + std::to_string(i) + " has norm below 1e-12");
    }
    out.row(i) = raw.row(i) / norm;
    if (norms) (*norms)[static_cast<std::size_t>(i)] = norm;
  }
  return out;
}

Matrix normalize_cols(const Matrix& raw, std::vector<double>* norms) {
  Matrix out(raw.rows(), raw.cols());
  if (norms) norms->resize(static_cast<std::size_t>(raw.cols()));
  for (Eigen::Index j = 0; j < raw.cols(); ++j) {
    const double norm = raw.col(j).norm();
    if (!(norm >= kZeroNormEpsilon)) {
      fail(ErrorCode::kZeroNorm,
           "column " + std::to_string(j) + " has norm below 1e-12");
    }
    out.col(j) = raw.col(j) / norm;
    if (norms) (*norms)[static_cast<std::size_t>(j)] = norm;
  }
  return out;
}

Matrix normalize_rows_backward(const Matrix& unit, const Matrix& grad,
                               const std::vector<double>& norms) {
  require(unit.rows() == grad.rows() && unit.cols() == grad.cols(),
          ErrorCode::kShapeMismatch, "normalize_rows_backward shape mismatch");
  Matrix out(grad.rows(), grad.cols());
  for (Eigen::Index i = 0; i < grad.rows(); ++i) {
    const double along = grad.row(i).dot(unit.row(i));
    const double norm =
        norms.empty() ? 1.0 : norms[static_cast<std::size_t>(i)];
    out.row(i) = (grad.row(i) - along * unit.row(i)) / norm;
  }
  return out;
}

Matrix normalize_cols_backward(const Matrix& unit, const Matrix& grad,
                               const std::vector<double>& norms) {
  require(unit.rows() == grad.rows() && unit.cols() == grad.cols(),
          ErrorCode::kShapeMismatch, "normalize_cols_backward shape mismatch");
  Matrix out(grad.rows(), grad.cols());
  for (Eigen::Index j = 0; j < grad.cols(); ++j) {
    const double along = grad.col(j).dot(unit.col(j));
    const double norm =
        norms.empty() ? 1.0 : norms[static_cast<std::size_t>(j)];
    out.col(j) = (grad.col(j) - along * unit.col(j)) / norm;
  }
  return out;
}

}  // namespace md
