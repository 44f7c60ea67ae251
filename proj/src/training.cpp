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

#include "training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <json.hpp>

#include "errors.hpp"
#include "rng.hpp"

namespace md {

namespace {

constexpr double kDivergenceLimit = 1e4;
constexpr Eigen::Index kSignalChunk = 1024;

enum Stream : std::uint64_t {
  kShuffleStream = 0x100,
  kTripletClassStream,
  kTripletSampleStream,
  kCenterInitStream,
  kStudentInitStream,
};

// Walks seeded per-epoch permutations of a fixed index pool.
class EpochSampler {
 public:
  EpochSampler(std::vector<std::size_t> pool, std::uint64_t seed)
      : pool_(std::move(pool)), seed_(seed) {
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (cursor_ == order_.size()) {
        ++epoch_;
        reshuffle();
      }
      out.push_back(pool_[order_[cursor_++]]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_ = permutation(pool_.size(), derive_key(seed_, kShuffleStream, epoch_));
    cursor_ = 0;
  }

  std::vector<std::size_t> pool_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

// P classes x K samples, drawn without replacement inside each class.
class PkSampler {
 public:
  PkSampler(const Dataset& dataset, int per_class, std::uint64_t seed)
      : per_class_(static_cast<std::size_t>(per_class)), seed_(seed) {
    std::vector<std::vector<std::size_t>> by_class(
        static_cast<std::size_t>(dataset.num_classes));
    for (std::size_t i : dataset.indices(Split::kTrain)) {
      by_class[static_cast<std::size_t>(dataset.labels[i])].push_back(i);
    }
    for (auto& members : by_class) {
      if (members.size() >= 2) classes_.push_back(std::move(members));
    }
  }

  std::size_t num_classes() const noexcept { return classes_.size(); }

  std::vector<std::size_t> next(std::size_t batch, std::int64_t iteration) {
    const std::size_t p = batch / per_class_;
    const auto iter = static_cast<std::uint64_t>(iteration);
    const auto class_order =
        permutation(classes_.size(), derive_key(seed_, kTripletClassStream, iter));
    std::vector<std::size_t> out;
    out.reserve(batch);
    for (std::size_t k = 0; k < p; ++k) {
      const std::size_t c = class_order[k % classes_.size()];
      const auto& members = classes_[c];
      const auto order = permutation(
          members.size(), derive_key(seed_, kTripletSampleStream, iter, c));
      for (std::size_t s = 0; s < per_class_; ++s) {
        out.push_back(members[order[s % members.size()]]);
      }
    }
    return out;
  }

 private:
  std::size_t per_class_;
  std::uint64_t seed_;
  std::vector<std::vector<std::size_t>> classes_;
};

Matrix init_center_params(int dim, int classes, std::uint64_t seed) {
  RngStream rng(derive_key(seed, kCenterInitStream));
  Matrix raw(dim, classes);
  for (int j = 0; j < classes; ++j) {
    for (int d = 0; d < dim; ++d) raw(d, j) = rng.normal();
  }
  return normalize_cols(raw);
}

std::vector<int> layer_dims_for(const TrainConfig& config, int input_dim) {
  std::vector<int> dims{input_dim};
  dims.insert(dims.end(), config.hidden.begin(), config.hidden.end());
  dims.push_back(config.embedding_dim);
  return dims;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(rows[r]));
  }
  return out;
}

struct StepLoss {
  double value = 0.0;
  Matrix grad_embeddings;  // with respect to the unit embeddings
  Matrix grad_centers;     // with respect to raw center params; empty if unused
};

// The learner: MLP plus center parameters (frozen or trainable).
struct Learner {
  MlpParams params;
  Matrix center_params;  // D x n
  bool centers_frozen = false;
  std::optional<ClassCenters> frozen_centers;
};

struct BatchContext {
  const std::vector<std::size_t>& indices;
  const std::vector<int>& labels;
  const EmbeddingBatch& embeddings;
  const ClassCenters& centers;
  const std::vector<double>& center_norms;
};

StepLoss classification_step(const BatchContext& batch, const LossOutput& loss,
                             bool want_center_grad) {
  const EmbeddingGrads g = backprop_to_embeddings(
      loss.grad_logits, batch.embeddings, batch.centers, {}, batch.center_norms);
  StepLoss out;
  out.value = loss.value;
  out.grad_embeddings = g.grad_x;
  if (want_center_grad && g.grad_w_applicable) out.grad_centers = g.grad_w;
  return out;
}

// All valid (anchor, positive, negative) combinations in lexicographic index
// order, truncated at cap.
struct MinedTriplets {
  std::vector<std::size_t> anchor, positive, negative;  // batch positions
};

MinedTriplets mine_triplets(const std::vector<int>& labels, std::size_t cap) {
  MinedTriplets t;
  const std::size_t n = labels.size();
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (std::size_t q = 0; q < n; ++q) {
        if (labels[q] == labels[a]) continue;
        if (t.anchor.size() == cap) return t;
        t.anchor.push_back(a);
        t.positive.push_back(p);
        t.negative.push_back(q);
      }
    }
  }
  return t;
}

void check_finite_loss(double value, std::int64_t iteration) {
  if (!std::isfinite(value) || value > kDivergenceLimit) {
    fail(ErrorCode::kDivergedLoss,
         "loss " + std::to_string(value) + " at iteration " +
             std::to_string(iteration));
  }
}

Checkpoint run_training(const TrainConfig& config, const Dataset& dataset,
                        Learner learner, const TeacherSignals* signals,
                        Role role, const IterationHook& hook) {
  OptimizerState opt = config.optimizer;
  opt.velocity.clear();
  const bool triplet = config.method == Method::kTripletL2 ||
                       config.method == Method::kTripletCos;
  const TripletMetric metric = config.method == Method::kTripletL2
                                   ? TripletMetric::kL2
                                   : TripletMetric::kCos;
  const std::vector<std::size_t> train = dataset.indices(Split::kTrain);
  require(!train.empty(), ErrorCode::kInsufficientSamples,
          "dataset has no TRAIN samples");
  EpochSampler sampler(train, config.seed);
  std::optional<PkSampler> pk;
  if (triplet) {
    pk.emplace(dataset, config.triplet_per_class, config.seed);
    require(pk->num_classes() >= 2, ErrorCode::kInsufficientSamples,
            "triplet batches need two classes with two TRAIN samples");
  }

  std::optional<double> global_a_max;
  if (config.method == Method::kMarginDistillation && config.global_a_max) {
    double m = 0.0;
    for (std::size_t i : train) m = std::max(m, signals->own_cos[i]);
    global_a_max = m;
  }

  const auto batch_size = static_cast<std::size_t>(config.batch_size);
  double last_loss = 0.0;
  std::vector<double> center_norms;
  for (std::int64_t it = 0; it < config.total_iterations; ++it) {
    const double lr = lr_at(it, opt);
    const std::vector<std::size_t> idx =
        triplet ? pk->next(batch_size, it) : sampler.next(batch_size);
    const std::vector<int> labels = dataset.gather_labels(idx);
    const ForwardResult fwd = [&] {
      try {
        return mlp_forward(learner.params, dataset.gather(idx));
      } catch (const Error& e) {
        if (it == 0 || e.code() != ErrorCode::kZeroNorm) throw;
        fail(ErrorCode::kDivergedLoss,
             "embeddings degenerated at iteration " + std::to_string(it) + ": " +
                 e.what());
      }
    }();

    std::optional<ClassCenters> live;
    if (!learner.centers_frozen) {
      live.emplace(normalize_cols(learner.center_params, &center_norms));
    } else {
      center_norms.clear();
    }
    const ClassCenters& centers =
        learner.centers_frozen ? *learner.frozen_centers : *live;
    const BatchContext ctx{idx, labels, fwd.embeddings, centers, center_norms};

    StepLoss step;
    switch (config.method) {
      case Method::kArcFace: {
        const auto logits = cosine_logits(fwd.embeddings, centers);
        step = classification_step(ctx, unified_margin_loss(logits, labels, config.margin),
                                   true);
        break;
      }
      case Method::kMarginDistillation: {
        std::vector<double> a(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) a[k] = signals->own_cos[idx[k]];
        const PerSampleMargins margins =
            per_sample_margins(a, config.m_min, config.m_max, global_a_max);
        for (double m : margins.margins) {
          require(m >= config.m_min && m <= config.m_max, ErrorCode::kInvalidConfig,
                  "per-sample margin escaped [m_min, m_max]");
        }
        const auto logits = cosine_logits(fwd.embeddings, centers);
        step = classification_step(
            ctx, margin_distillation_loss(logits, labels, margins, config.margin.s),
            true);
        break;
      }
      case Method::kAngular: {
        const auto logits = cosine_logits(fwd.embeddings, centers);
        step = classification_step(ctx, unified_margin_loss(logits, labels, config.margin),
                                   true);
        const EmbeddingLossOutput ang = angular_distillation_loss(
            fwd.embeddings.matrix(), gather_rows(signals->embeddings, idx));
        step.value += config.lambda_angular * ang.value;
        step.grad_embeddings += config.lambda_angular * ang.grad;
        break;
      }
      case Method::kTemperatureKd: {
        const auto logits = cosine_logits(fwd.embeddings, centers);
        const CosineLogits teacher_logits(gather_rows(signals->logits, idx));
        step = classification_step(
            ctx,
            temperature_kd_loss(logits, teacher_logits, labels, config.margin,
                                config.temperature, config.kd_hard_weight),
            true);
        break;
      }
      case Method::kTripletL2:
      case Method::kTripletCos: {
        const Matrix teacher_emb = gather_rows(signals->embeddings, idx);
        const MinedTriplets t = mine_triplets(labels, batch_size);
        const Matrix& emb = fwd.embeddings.matrix();
        const TripletBatch student{gather_rows(emb, t.anchor),
                                   gather_rows(emb, t.positive),
                                   gather_rows(emb, t.negative)};
        const TripletBatch teacher{gather_rows(teacher_emb, t.anchor),
                                   gather_rows(teacher_emb, t.positive),
                                   gather_rows(teacher_emb, t.negative)};
        const TripletLossOutput loss = triplet_distillation_loss(
            student, teacher, config.m_min, config.m_max, metric);
        step.value = loss.value;
        step.grad_embeddings = Matrix::Zero(emb.rows(), emb.cols());
        for (std::size_t k = 0; k < t.anchor.size(); ++k) {
          const auto r = static_cast<Eigen::Index>(k);
          step.grad_embeddings.row(static_cast<Eigen::Index>(t.anchor[k])) +=
              loss.grad_anchor.row(r);
          step.grad_embeddings.row(static_cast<Eigen::Index>(t.positive[k])) +=
              loss.grad_positive.row(r);
          step.grad_embeddings.row(static_cast<Eigen::Index>(t.negative[k])) +=
              loss.grad_negative.row(r);
        }
        break;
      }
    }
    check_finite_loss(step.value, it);
    last_loss = step.value;

    const MlpGrads grads =
        mlp_backward(learner.params, fwd.cache, step.grad_embeddings);
    std::vector<TensorSlot> slots;
    for (std::size_t l = 0; l < learner.params.num_layers(); ++l) {
      Matrix& w = learner.params.weights[l];
      Vector& b = learner.params.biases[l];
      slots.push_back({{w.data(), static_cast<std::size_t>(w.size())},
                       {grads.weights[l].data(), static_cast<std::size_t>(w.size())},
                       false});
      slots.push_back({{b.data(), static_cast<std::size_t>(b.size())},
                       {grads.biases[l].data(), static_cast<std::size_t>(b.size())},
                       false});
    }
    // Centers without a gradient (frozen, or unused by triplet losses) are
    // passed as frozen so the optimizer leaves them alone.
    const bool center_trainable = !learner.centers_frozen && step.grad_centers.size() > 0;
    const Matrix& center_grad = center_trainable ? step.grad_centers : learner.center_params;
    slots.push_back(
        {{learner.center_params.data(), static_cast<std::size_t>(learner.center_params.size())},
         {center_grad.data(), static_cast<std::size_t>(center_grad.size())},
         !center_trainable});
    sgd_momentum_step(slots, opt, lr);
    for (const TensorSlot& slot : slots) {
      for (double v : slot.value) {
        if (!std::isfinite(v)) {
          fail(ErrorCode::kDivergedLoss,
               "parameters became non-finite at iteration " + std::to_string(it));
        }
      }
    }
    // Trainable centers are kept on the unit sphere.
    if (center_trainable) learner.center_params = normalize_cols(learner.center_params);

    if (hook) {
      if (learner.centers_frozen) {
        hook({it, lr, step.value, &*learner.frozen_centers});
      } else {
        const ClassCenters after = ClassCenters::from_raw(learner.center_params);
        hook({it, lr, step.value, &after});
      }
    }
  }

  ClassCenters final_centers =
      learner.centers_frozen ? *learner.frozen_centers
                             : ClassCenters::from_raw(learner.center_params);
  TrainingMeta meta{config.total_iterations, last_loss, config.seed,
                    method_name(config.method)};
  return Checkpoint{kCheckpointVersion, role, std::move(learner.params),
                    std::move(final_centers), std::move(meta)};
}

}  // namespace

std::string method_name(Method method) {
  switch (method) {
    case Method::kArcFace: return "arcface";
    case Method::kMarginDistillation: return "margin";
    case Method::kTripletL2: return "triplet-l2";
    case Method::kTripletCos: return "triplet-cos";
    case Method::kAngular: return "angular";
    case Method::kTemperatureKd: return "temp-kd";
  }
  return "unknown";
}

std::optional<Method> parse_method(std::string_view name) {
  for (Method m : kAllMethods) {
    if (method_name(m) == name) return m;
  }
  return std::nullopt;
}

void OptimizerState::validate() const {
  require(momentum >= 0.0 && momentum < 1.0, ErrorCode::kInvalidConfig,
          "momentum must lie in [0, 1)");
  require(weight_decay >= 0.0, ErrorCode::kInvalidConfig,
          "weight decay must be >= 0");
  require(base_lr > 0.0, ErrorCode::kInvalidConfig, "learning rate must be > 0");
  require(decay_factor > 0.0, ErrorCode::kInvalidConfig,
          "decay factor must be > 0");
  for (std::size_t k = 0; k < milestones.size(); ++k) {
    require(milestones[k] >= 0, ErrorCode::kInvalidConfig,
            "milestones must be >= 0");
    require(k == 0 || milestones[k] > milestones[k - 1], ErrorCode::kInvalidConfig,
            "milestones must be strictly increasing");
  }
}

double lr_at(std::int64_t iteration, const OptimizerState& state) {
  double lr = state.base_lr;
  for (std::int64_t m : state.milestones) {
    if (iteration >= m) lr /= state.decay_factor;
  }
  return lr;
}

void sgd_momentum_step(std::span<const TensorSlot> slots, OptimizerState& state,
                       double lr) {
  if (state.velocity.empty()) {
    state.velocity.resize(slots.size());
    for (std::size_t k = 0; k < slots.size(); ++k) {
      state.velocity[k].assign(slots[k].value.size(), 0.0);
    }
  }
  require(state.velocity.size() == slots.size(), ErrorCode::kShapeMismatch,
          "slot count changed between optimizer steps");
  for (std::size_t k = 0; k < slots.size(); ++k) {
    const TensorSlot& slot = slots[k];
    require(slot.value.size() == slot.grad.size() &&
                slot.value.size() == state.velocity[k].size(),
            ErrorCode::kShapeMismatch,
            "slot " + std::to_string(k) + " has mismatched sizes");
    if (slot.frozen) continue;
    std::vector<double>& v = state.velocity[k];
    for (std::size_t i = 0; i < slot.value.size(); ++i) {
      const double g = slot.grad[i] + state.weight_decay * slot.value[i];
      v[i] = state.momentum * v[i] + g;
      slot.value[i] -= lr * v[i];
    }
  }
}

TrainConfig TrainConfig::teacher_preset() {
  TrainConfig c;
  c.method = Method::kArcFace;
  c.hidden = {256, 256};
  return c;
}

TrainConfig TrainConfig::student_preset(Method method) {
  TrainConfig c;
  c.method = method;
  c.hidden = {32};
  return c;
}

void TrainConfig::validate() const {
  require(batch_size >= 2, ErrorCode::kInvalidConfig, "batch size must be >= 2");
  require(total_iterations >= 0, ErrorCode::kInvalidConfig,
          "iterations must be >= 0");
  require(embedding_dim >= 2, ErrorCode::kInvalidConfig,
          "embedding dimension must be >= 2");
  for (int h : hidden) {
    require(h >= 1, ErrorCode::kInvalidConfig, "hidden widths must be >= 1");
  }
  margin.validate();
  require(m_min >= 0.0 && m_min <= m_max && m_max < std::numbers::pi / 2,
          ErrorCode::kInvalidConfig, "need 0 <= m_min <= m_max < pi/2");
  require(temperature > 0.0, ErrorCode::kNonPositiveTemperature,
          "temperature must be positive");
  require(kd_hard_weight >= 0.0, ErrorCode::kInvalidConfig,
          "kd hard-label weight must be >= 0");
  require(lambda_angular >= 0.0, ErrorCode::kInvalidConfig,
          "angular weight must be >= 0");
  if (method == Method::kTripletL2 || method == Method::kTripletCos) {
    require(triplet_per_class >= 2, ErrorCode::kInvalidConfig,
            "triplet batches need >= 2 samples per class");
    require(batch_size % triplet_per_class == 0 &&
                batch_size / triplet_per_class >= 2,
            ErrorCode::kInvalidConfig,
            "batch size must be a multiple of samples-per-class covering >= 2 classes");
  }
  optimizer.validate();
}

IterationHook jsonl_metrics_writer(std::ostream& out) {
  return [&out](const IterationReport& r) {
    const nlohmann::json line = {
        {"iteration", r.iteration}, {"lr", r.lr}, {"loss", r.loss}};
    out << line.dump() << '\n';
  };
}

Checkpoint train_teacher(const TrainConfig& config, const Dataset& dataset,
                         const IterationHook& hook) {
  config.validate();
  require(config.method == Method::kArcFace, ErrorCode::kInvalidConfig,
          "teachers are trained with the arcface method");
  dataset.validate();
  Learner learner;
  learner.params = init_mlp(layer_dims_for(config, dataset.input_dim()), config.seed);
  learner.center_params =
      init_center_params(config.embedding_dim, dataset.num_classes, config.seed);
  return run_training(config, dataset, std::move(learner), nullptr, Role::kTeacher,
                      hook);
}

ClassCenters transfer_centers(const Checkpoint& teacher, int student_embedding_dim) {
  require(teacher.role == Role::kTeacher, ErrorCode::kInvalidConfig,
          "center transfer needs a teacher checkpoint");
  require(teacher.centers.dim() == student_embedding_dim,
          ErrorCode::kDimensionMismatch,
          "teacher embedding dimension " + std::to_string(teacher.centers.dim()) +
              " != student embedding dimension " +
              std::to_string(student_embedding_dim));
  const Matrix& w = teacher.centers.matrix();
  bool unit = true;
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    unit = unit && std::abs(w.col(j).norm() - 1.0) <= 1e-12;
  }
  // Already-unit columns are copied verbatim so student and teacher centers
  // stay bit-identical.
  return unit ? ClassCenters(w, true) : ClassCenters::from_raw(w, true);
}

TeacherSignals precompute_teacher_signals(const Checkpoint& teacher,
                                          const Dataset& dataset) {
  require(teacher.params.input_dim() == dataset.input_dim(),
          ErrorCode::kDimensionMismatch,
          "teacher input dimension does not match dataset");
  require(teacher.centers.num_classes() == dataset.num_classes,
          ErrorCode::kDimensionMismatch,
          "teacher class count does not match dataset");
  const auto m = static_cast<Eigen::Index>(dataset.size());
  TeacherSignals s;
  s.embeddings.resize(m, teacher.params.embedding_dim());
  for (Eigen::Index start = 0; start < m; start += kSignalChunk) {
    const Eigen::Index rows = std::min(kSignalChunk, m - start);
    s.embeddings.middleRows(start, rows) =
        mlp_embed(teacher.params, dataset.inputs.middleRows(start, rows)).matrix();
  }
  s.logits = s.embeddings * teacher.centers.matrix();
  s.own_cos.resize(dataset.size());
  const Matrix& w = teacher.centers.matrix();
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto col = w.col(dataset.labels[static_cast<std::size_t>(i)]);
    const double c =
        s.embeddings.row(i).dot(col) / (s.embeddings.row(i).norm() * col.norm());
    s.own_cos[static_cast<std::size_t>(i)] = std::clamp(c, -1.0, 1.0);
  }
  const double hi = 1.0 - kCosineClamp;
  s.logits = s.logits.cwiseMax(-hi).cwiseMin(hi);
  return s;
}

Checkpoint distill_student(const TrainConfig& config, const Dataset& dataset,
                           const Checkpoint* teacher, const IterationHook& hook) {
  config.validate();
  dataset.validate();
  const bool needs_teacher = config.method != Method::kArcFace;
  if (needs_teacher && teacher == nullptr) {
    fail(ErrorCode::kMissingTeacher,
         "method '" + method_name(config.method) + "' needs a teacher checkpoint");
  }
  Learner learner;
  learner.params = init_mlp(layer_dims_for(config, dataset.input_dim()),
                            derive_key(config.seed, kStudentInitStream));
  std::optional<TeacherSignals> signals;
  if (config.method == Method::kMarginDistillation) {
    ClassCenters centers = transfer_centers(*teacher, config.embedding_dim);
    learner.center_params = centers.matrix();
    learner.centers_frozen = true;
    learner.frozen_centers.emplace(std::move(centers));
  } else {
    learner.center_params =
        init_center_params(config.embedding_dim, dataset.num_classes,
                           derive_key(config.seed, kStudentInitStream));
  }
  if (needs_teacher) {
    if (config.method == Method::kAngular) {
      require(teacher->params.embedding_dim() == config.embedding_dim,
              ErrorCode::kDimensionMismatch,
              "angular distillation needs equal teacher and student dimensions");
    }
    signals = precompute_teacher_signals(*teacher, dataset);
  }
  return run_training(config, dataset, std::move(learner),
                      signals ? &*signals : nullptr, Role::kStudent, hook);
}

}  // namespace md
