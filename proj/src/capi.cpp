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

#include "margindistill/margindistill.h"

#include <cstdlib>
#include <cstring>
#include <exception>
#include <fstream>
#include <new>
#include <stdexcept>
#include <string>
#include <vector>

#include "binary_io.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "evaluation.hpp"
#include "network.hpp"
#include "training.hpp"

struct md_dataset {
  md::Dataset value;
};

struct md_checkpoint {
  md::Checkpoint value;
};

struct md_report {
  md::MetricsReport value;
};

namespace {

thread_local std::string g_last_error;

md_status to_status(md::ErrorCode code) {
  return static_cast<md_status>(static_cast<int>(code));
}

md_status set_error(md_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

// Runs fn, translating exceptions into status codes.
template <typename Fn>
md_status guarded(Fn&& fn) {
  try {
    g_last_error.clear();
    fn();
    return MD_OK;
  } catch (const md::Error& e) {
    return set_error(to_status(e.code()), e.what());
  } catch (const std::invalid_argument& e) {
    return set_error(MD_E_INVALID_ARGUMENT, e.what());
  } catch (const std::bad_alloc&) {
    return set_error(MD_E_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(MD_E_INTERNAL, e.what());
  }
}

void require_arg(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

template <std::size_t N>
void copy_fixed(char (&dst)[N], const std::string& src) {
  const std::size_t n = std::min(src.size(), N - 1);
  std::memcpy(dst, src.data(), n);
  dst[n] = '\0';
}

md::Method to_method(md_method m) {
  switch (m) {
    case MD_METHOD_ARCFACE: return md::Method::kArcFace;
    case MD_METHOD_MARGIN: return md::Method::kMarginDistillation;
    case MD_METHOD_TRIPLET_L2: return md::Method::kTripletL2;
    case MD_METHOD_TRIPLET_COS: return md::Method::kTripletCos;
    case MD_METHOD_ANGULAR: return md::Method::kAngular;
    case MD_METHOD_TEMP_KD: return md::Method::kTemperatureKd;
  }
  md::fail(md::ErrorCode::kInvalidConfig, "unknown method id");
}

md_method from_method(md::Method m) {
  switch (m) {
    case md::Method::kArcFace: return MD_METHOD_ARCFACE;
    case md::Method::kMarginDistillation: return MD_METHOD_MARGIN;
    case md::Method::kTripletL2: return MD_METHOD_TRIPLET_L2;
    case md::Method::kTripletCos: return MD_METHOD_TRIPLET_COS;
    case md::Method::kAngular: return MD_METHOD_ANGULAR;
    case md::Method::kTemperatureKd: return MD_METHOD_TEMP_KD;
  }
  return MD_METHOD_ARCFACE;
}

void fill_config(const md::TrainConfig& c, md_train_config* out) {
  *out = md_train_config{};
  out->method = from_method(c.method);
  out->batch_size = c.batch_size;
  out->iterations = c.total_iterations;
  out->seed = c.seed;
  out->num_hidden = static_cast<int32_t>(c.hidden.size());
  for (std::size_t k = 0; k < c.hidden.size(); ++k) out->hidden[k] = c.hidden[k];
  out->embedding_dim = c.embedding_dim;
  out->m1 = c.margin.m1;
  out->m2 = c.margin.m2;
  out->m3 = c.margin.m3;
  out->s = c.margin.s;
  out->m_min = c.m_min;
  out->m_max = c.m_max;
  out->global_a_max = c.global_a_max ? 1 : 0;
  out->temperature = c.temperature;
  out->kd_hard_weight = c.kd_hard_weight;
  out->lambda_angular = c.lambda_angular;
  out->triplet_per_class = c.triplet_per_class;
  out->base_lr = c.optimizer.base_lr;
  out->momentum = c.optimizer.momentum;
  out->weight_decay = c.optimizer.weight_decay;
  out->decay_factor = c.optimizer.decay_factor;
  out->num_milestones = static_cast<int32_t>(c.optimizer.milestones.size());
  for (std::size_t k = 0; k < c.optimizer.milestones.size(); ++k) {
    out->milestones[k] = c.optimizer.milestones[k];
  }
}

md::TrainConfig to_config(const md_train_config& in) {
  md::require(in.num_hidden >= 0 && in.num_hidden <= MD_MAX_HIDDEN,
              md::ErrorCode::kInvalidConfig, "num_hidden out of range");
  md::require(in.num_milestones >= 0 && in.num_milestones <= MD_MAX_MILESTONES,
              md::ErrorCode::kInvalidConfig, "num_milestones out of range");
  md::TrainConfig c;
  c.method = to_method(in.method);
  c.batch_size = in.batch_size;
  c.total_iterations = in.iterations;
  c.seed = in.seed;
  c.hidden.assign(in.hidden, in.hidden + in.num_hidden);
  c.embedding_dim = in.embedding_dim;
  c.margin = {in.m1, in.m2, in.m3, in.s};
  c.m_min = in.m_min;
  c.m_max = in.m_max;
  c.global_a_max = in.global_a_max != 0;
  c.temperature = in.temperature;
  c.kd_hard_weight = in.kd_hard_weight;
  c.lambda_angular = in.lambda_angular;
  c.triplet_per_class = in.triplet_per_class;
  c.optimizer.base_lr = in.base_lr;
  c.optimizer.momentum = in.momentum;
  c.optimizer.weight_decay = in.weight_decay;
  c.optimizer.decay_factor = in.decay_factor;
  c.optimizer.milestones.assign(in.milestones, in.milestones + in.num_milestones);
  c.validate();
  return c;
}

// Runs a training function with an optional JSONL metrics stream.
template <typename Fn>
md::Checkpoint with_metrics(const char* metrics_path, Fn&& train) {
  if (metrics_path == nullptr) return train(md::IterationHook{});
  std::ofstream out(metrics_path, std::ios::binary | std::ios::trunc);
  if (!out) {
    md::fail(md::ErrorCode::kIoFailure,
             std::string("cannot open metrics file '") + metrics_path + "'");
  }
  md::Checkpoint ck = train(md::jsonl_metrics_writer(out));
  out.flush();
  if (!out) {
    md::fail(md::ErrorCode::kIoFailure,
             std::string("write error on metrics file '") + metrics_path + "'");
  }
  return ck;
}

}  // namespace

extern "C" {

const char* md_version(void) { return "1.0.0"; }

const char* md_last_error(void) { return g_last_error.c_str(); }

const char* md_status_name(md_status status) {
  switch (status) {
    case MD_OK: return "OK";
    case MD_E_INVALID_ARGUMENT: return "E_INVALID_ARGUMENT";
    case MD_E_INTERNAL: return "E_INTERNAL";
    default:
      if (status >= MD_E_ZERO_NORM && status <= MD_E_DIVERGED_LOSS) {
        return md::error_code_name(static_cast<md::ErrorCode>(status)).data();
      }
      return "E_UNKNOWN";
  }
}

const char* md_method_name(md_method method) {
  switch (method) {
    case MD_METHOD_ARCFACE: return "arcface";
    case MD_METHOD_MARGIN: return "margin";
    case MD_METHOD_TRIPLET_L2: return "triplet-l2";
    case MD_METHOD_TRIPLET_COS: return "triplet-cos";
    case MD_METHOD_ANGULAR: return "angular";
    case MD_METHOD_TEMP_KD: return "temp-kd";
  }
  return "unknown";
}

md_status md_method_from_name(const char* name, md_method* out) {
  if (name == nullptr || out == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  const auto m = md::parse_method(name);
  if (!m) {
    return set_error(MD_E_INVALID_CONFIG,
                     std::string("unknown method '") + name +
                         "' (expected arcface|margin|triplet-l2|triplet-cos|"
                         "angular|temp-kd)");
  }
  *out = from_method(*m);
  return MD_OK;
}

void md_string_free(char* s) { std::free(s); }

void md_gen_params_default(md_gen_params* params) {
  if (params == nullptr) return;
  const md::GenerationParams d;
  *params = {d.num_classes, d.per_class, d.input_dim, d.noise_sigma, d.seed};
}

md_status md_dataset_generate(const md_gen_params* params, md_dataset** out) {
  if (params == nullptr || out == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  return guarded([&] {
    md::GenerationParams p{params->classes, params->per_class, params->input_dim,
                           params->noise_sigma, params->seed};
    *out = new md_dataset{md::generate_synthetic(p)};
  });
}

md_status md_dataset_load(const char* path, md_dataset** out) {
  if (path == nullptr || out == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  return guarded([&] { *out = new md_dataset{md::dataset_load(path)}; });
}

md_status md_dataset_save(const md_dataset* dataset, const char* path) {
  if (dataset == nullptr || path == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  return guarded([&] { md::dataset_save(dataset->value, path); });
}

md_status md_dataset_get_info(const md_dataset* dataset, md_dataset_info* info) {
  if (dataset == nullptr || info == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  const md::Dataset& ds = dataset->value;
  info->samples = ds.size();
  info->train_samples = ds.indices(md::Split::kTrain).size();
  info->eval_samples = ds.indices(md::Split::kEval).size();
  info->input_dim = ds.input_dim();
  info->classes = ds.num_classes;
  info->seed = ds.seed;
  info->noise_sigma = ds.noise_sigma;
  return MD_OK;
}

void md_dataset_free(md_dataset* dataset) { delete dataset; }

void md_train_config_teacher_default(md_train_config* config) {
  if (config != nullptr) fill_config(md::TrainConfig::teacher_preset(), config);
}

void md_train_config_student_default(md_train_config* config, md_method method) {
  if (config == nullptr) return;
  try {
    fill_config(md::TrainConfig::student_preset(to_method(method)), config);
  } catch (const md::Error&) {
    fill_config(md::TrainConfig::student_preset(md::Method::kArcFace), config);
  }
}

md_status md_train_teacher(const md_dataset* dataset, const md_train_config* config,
                           const char* metrics_path, md_checkpoint** out) {
  if (dataset == nullptr || config == nullptr || out == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  return guarded([&] {
    const md::TrainConfig c = to_config(*config);
    md::Checkpoint ck = with_metrics(metrics_path, [&](const md::IterationHook& hook) {
      return md::train_teacher(c, dataset->value, hook);
    });
    *out = new md_checkpoint{std::move(ck)};
  });
}

md_status md_distill(const md_dataset* dataset, const md_checkpoint* teacher,
                     const md_train_config* config, const char* metrics_path,
                     md_checkpoint** out) {
  if (dataset == nullptr || config == nullptr || out == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  return guarded([&] {
    const md::TrainConfig c = to_config(*config);
    md::Checkpoint ck = with_metrics(metrics_path, [&](const md::IterationHook& hook) {
      return md::distill_student(c, dataset->value,
                                 teacher ? &teacher->value : nullptr, hook);
    });
    *out = new md_checkpoint{std::move(ck)};
  });
}

md_status md_checkpoint_load(const char* path, md_checkpoint** out) {
  if (path == nullptr || out == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  return guarded([&] { *out = new md_checkpoint{md::checkpoint_load(path)}; });
}

md_status md_checkpoint_save(const md_checkpoint* checkpoint, const char* path) {
  if (checkpoint == nullptr || path == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  return guarded([&] { md::checkpoint_save(checkpoint->value, path); });
}

md_status md_checkpoint_get_info(const md_checkpoint* checkpoint,
                                 md_checkpoint_info* info) {
  if (checkpoint == nullptr || info == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  const md::Checkpoint& ck = checkpoint->value;
  *info = md_checkpoint_info{};
  info->role = ck.role == md::Role::kTeacher ? MD_ROLE_TEACHER : MD_ROLE_STUDENT;
  info->format_version = ck.format_version;
  info->input_dim = ck.params.input_dim();
  info->embedding_dim = ck.params.embedding_dim();
  info->num_layers = static_cast<int32_t>(ck.params.num_layers());
  info->classes = static_cast<int32_t>(ck.centers.num_classes());
  info->centers_frozen = ck.centers.frozen() ? 1 : 0;
  info->iterations = ck.meta.iterations;
  info->final_loss = ck.meta.final_loss;
  info->seed = ck.meta.seed;
  copy_fixed(info->method, ck.meta.method);
  return MD_OK;
}

md_status md_checkpoint_get_centers(const md_checkpoint* checkpoint, double* out,
                                    size_t capacity) {
  if (checkpoint == nullptr || out == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  const md::Matrix& w = checkpoint->value.centers.matrix();
  if (capacity < static_cast<size_t>(w.size())) {
    return set_error(MD_E_INVALID_ARGUMENT, "center buffer too small");
  }
  size_t k = 0;
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) out[k++] = w(r, c);
  }
  return MD_OK;
}

void md_checkpoint_free(md_checkpoint* checkpoint) { delete checkpoint; }

void md_protocol_params_default(md_protocol_params* params) {
  if (params == nullptr) return;
  *params = {MD_AUTO, MD_AUTO, MD_AUTO, MD_AUTO, 0};
}

md_status md_evaluate(const md_checkpoint* checkpoint, const md_dataset* dataset,
                      const md_protocol_params* params, const char* label,
                      md_report** out) {
  if (checkpoint == nullptr || dataset == nullptr || params == nullptr ||
      out == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  return guarded([&] {
    const md::Dataset& ds = dataset->value;
    const md::ProtocolCapacity cap = md::protocol_capacity(ds);
    const auto pick = [](uint64_t requested, std::size_t preferred,
                         std::size_t available) -> std::size_t {
      if (requested != MD_AUTO) return static_cast<std::size_t>(requested);
      return std::min(preferred, available);
    };
    const std::size_t n_pos =
        pick(params->positive_pairs, md::kDefaultPairsPerKind, cap.positive_pairs);
    const std::size_t n_neg =
        pick(params->negative_pairs, md::kDefaultPairsPerKind, cap.negative_pairs);
    const std::size_t n_probe =
        pick(params->probe_identities, 100, cap.probe_identities / 2);
    const std::size_t n_distractors =
        pick(params->distractors, 10'000, md::distractor_capacity(ds, n_probe));
    const auto verification =
        md::build_verification_pairs(ds, n_pos, n_neg, params->seed);
    const auto identification =
        md::build_identification(ds, n_probe, n_distractors, params->seed);
    const md::Checkpoint& ck = checkpoint->value;
    std::string name = label != nullptr ? std::string(label)
                       : ck.role == md::Role::kTeacher ? std::string("teacher")
                                                        : ck.meta.method;
    *out = new md_report{
        md::evaluate(ck, ds, verification, identification, std::move(name))};
  });
}

md_status md_report_get(const md_report* report, md_report_values* values) {
  if (report == nullptr || values == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  const md::MetricsReport& r = report->value;
  *values = md_report_values{};
  values->verification_accuracy = r.verification_accuracy;
  values->best_threshold = r.best_threshold;
  values->rank1_accuracy = r.rank1_accuracy;
  values->seed = r.seed;
  values->timing_seconds = r.timing_seconds;
  copy_fixed(values->method, r.method);
  copy_fixed(values->protocol, r.protocol);
  return MD_OK;
}

md_status md_report_save_json(const md_report* report, const char* path) {
  if (report == nullptr || path == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  return guarded([&] {
    md::io::write_file(path, md::report_to_json(report->value).dump(2) + "\n");
  });
}

md_status md_report_save_csv(const md_report* report, const char* path) {
  if (report == nullptr || path == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  return guarded([&] {
    const auto rows = md::gap_report(report->value, {});
    md::io::write_file(path, md::gap_report_csv(rows));
  });
}

md_status md_report_load_json(const char* path, md_report** out) {
  if (path == nullptr || out == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  return guarded([&] {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(md::io::read_file(path));
    } catch (const nlohmann::json::exception& e) {
      md::fail(md::ErrorCode::kInvalidConfig,
               std::string("report '") + path + "' is not JSON: " + e.what());
    }
    *out = new md_report{md::report_from_json(j)};
  });
}

void md_report_free(md_report* report) { delete report; }

md_status md_gap_report(const md_report* teacher, const md_report* const* students,
                        size_t num_students, int with_header, char** csv_out,
                        char** text_out) {
  if (teacher == nullptr || (num_students > 0 && students == nullptr)) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  return guarded([&] {
    std::vector<md::MetricsReport> list;
    for (size_t k = 0; k < num_students; ++k) {
      require_arg(students[k] != nullptr, "null student report");
      list.push_back(students[k]->value);
    }
    const auto rows = md::gap_report(teacher->value, list);
    char* csv = csv_out ? dup_string(md::gap_report_csv(rows, with_header != 0)) : nullptr;
    char* text = nullptr;
    try {
      if (text_out) text = dup_string(md::gap_report_text(rows));
    } catch (...) {
      std::free(csv);
      throw;
    }
    if (csv_out) *csv_out = csv;
    if (text_out) *text_out = text;
  });
}

md_status md_aggregate(const md_report* const* reports, size_t num_reports,
                       char** csv_out, char** text_out) {
  if (num_reports > 0 && reports == nullptr) {
    return set_error(MD_E_INVALID_ARGUMENT, "null argument");
  }
  return guarded([&] {
    std::vector<md::MetricsReport> list;
    for (size_t k = 0; k < num_reports; ++k) {
      require_arg(reports[k] != nullptr, "null report");
      list.push_back(reports[k]->value);
    }
    const auto rows = md::aggregate_reports(list);
    char* csv = csv_out ? dup_string(md::aggregate_csv(rows)) : nullptr;
    char* text = nullptr;
    try {
      if (text_out) text = dup_string(md::aggregate_text(rows));
    } catch (...) {
      std::free(csv);
      throw;
    }
    if (csv_out) *csv_out = csv;
    if (text_out) *text_out = text;
  });
}

}  // extern "C"
