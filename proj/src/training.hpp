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
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "data.hpp"
#include "losses.hpp"
#include "network.hpp"

namespace md {

enum class Method {
  kArcFace,
  kMarginDistillation,
  kTripletL2,
  kTripletCos,
  kAngular,
  kTemperatureKd,
};

inline constexpr Method kAllMethods[] = {
    Method::kArcFace,  Method::kMarginDistillation, Method::kTripletL2,
    Method::kTripletCos, Method::kAngular,          Method::kTemperatureKd};

// CLI spelling: arcface, margin, triplet-l2, triplet-cos, angular, temp-kd.
std::string method_name(Method method);
std::optional<Method> parse_method(std::string_view name);

// SGD with momentum, L2 weight decay and step-decay learning rate.
struct OptimizerState {
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double base_lr = 0.1;
  std::vector<std::int64_t> milestones{10'000, 15'000, 18'000};
  double decay_factor = 10.0;
  std::vector<std::vector<double>> velocity;  // one buffer per slot

  void validate() const;
};

// base_lr / decay_factor^k where k counts milestones <= iteration.
double lr_at(std::int64_t iteration, const OptimizerState& state);

struct TensorSlot {
  std::span<double> value;
  std::span<const double> grad;
  bool frozen = false;
};

// Per unfrozen slot: g = grad + wd * w; v = mu * v + g; w -= lr * v.
// Frozen slots are left bit-identical and their velocity untouched.
void sgd_momentum_step(std::span<const TensorSlot> slots, OptimizerState& state,
                       double lr);

struct TrainConfig {
  Method method = Method::kArcFace;
  int batch_size = 128;
  std::int64_t total_iterations = 20'000;
  std::uint64_t seed = 1;
  std::vector<int> hidden{32};  // hidden layer widths
  int embedding_dim = 64;
  MarginSpec margin = MarginSpec::arcface(64.0);
  double m_min = kDefaultMarginMin;
  double m_max = kDefaultMarginMax;
  bool global_a_max = false;  // ablation: a_max over the whole training set
  double temperature = 4.0;
  double kd_hard_weight = 0.0;
  double lambda_angular = 1.0;
  int triplet_per_class = 8;  // K of the P x K triplet batches
  OptimizerState optimizer;

  static TrainConfig teacher_preset();
  static TrainConfig student_preset(Method method);

  void validate() const;
};

struct IterationReport {
  std::int64_t iteration = 0;
  double lr = 0.0;
  double loss = 0.0;
  const ClassCenters* centers = nullptr;  // after the step
};

using IterationHook = std::function<void(const IterationReport&)>;

// Writes {"iteration":..,"lr":..,"loss":..} per line.
IterationHook jsonl_metrics_writer(std::ostream& out);

// Precomputed, immutable teacher outputs, indexed like the dataset.
struct TeacherSignals {
  std::vector<double> own_cos;  // a_i: cosine to the sample's own center
  Matrix embeddings;            // x_ti, M x D
  Matrix logits;                // M x n teacher cosine logits
};

Checkpoint train_teacher(const TrainConfig& config, const Dataset& dataset,
                         const IterationHook& hook = {});

// Copies the teacher's centers and freezes them. Fails with
// kDimensionMismatch unless the student embedding dimension equals the
// teacher's.
ClassCenters transfer_centers(const Checkpoint& teacher, int student_embedding_dim);

TeacherSignals precompute_teacher_signals(const Checkpoint& teacher,
                                          const Dataset& dataset);

Checkpoint distill_student(const TrainConfig& config, const Dataset& dataset,
                           const Checkpoint* teacher,
                           const IterationHook& hook = {});

}  // namespace md
