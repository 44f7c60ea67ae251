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

/* C interface to the margindistill library.
 *
 * Every function returns an md_status; on failure a thread-local message is
 * available from md_last_error(). Objects are opaque handles owned by the
 * caller and released with the matching *_free function. */

#ifndef MARGINDISTILL_H_
#define MARGINDISTILL_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  define MD_API __declspec(dllexport)
#else
#  define MD_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum md_status {
  MD_OK = 0,
  MD_E_ZERO_NORM = 1,
  MD_E_DIM_MISMATCH = 2,
  MD_E_SHAPE_MISMATCH = 3,
  MD_E_LABEL_OUT_OF_RANGE = 4,
  MD_E_EMPTY_BATCH = 5,
  MD_E_NONPOSITIVE_TEMPERATURE = 6,
  MD_E_INVALID_CONFIG = 7,
  MD_E_IO_FAILURE = 8,
  MD_E_CORRUPT_CHECKPOINT = 9,
  MD_E_CORRUPT_DATASET = 10,
  MD_E_INSUFFICIENT_SAMPLES = 11,
  MD_E_EMPTY_PROTOCOL = 12,
  MD_E_PROTOCOL_MISMATCH = 13,
  MD_E_MISSING_TEACHER = 14,
  MD_E_DIVERGED_LOSS = 15,
  MD_E_INVALID_ARGUMENT = 98,
  MD_E_INTERNAL = 99
} md_status;

typedef enum md_method {
  MD_METHOD_ARCFACE = 0,
  MD_METHOD_MARGIN = 1,
  MD_METHOD_TRIPLET_L2 = 2,
  MD_METHOD_TRIPLET_COS = 3,
  MD_METHOD_ANGULAR = 4,
  MD_METHOD_TEMP_KD = 5
} md_method;

typedef enum md_role { MD_ROLE_TEACHER = 0, MD_ROLE_STUDENT = 1 } md_role;

#define MD_MAX_HIDDEN 8
#define MD_MAX_MILESTONES 8
/* Protocol count meaning "the desk-scale default, capped by availability". */
#define MD_AUTO UINT64_MAX

typedef struct md_dataset md_dataset;
typedef struct md_checkpoint md_checkpoint;
typedef struct md_report md_report;

MD_API const char* md_version(void);
MD_API const char* md_last_error(void);
/* Machine-greppable name such as "E_DIM_MISMATCH". */
MD_API const char* md_status_name(md_status status);
MD_API const char* md_method_name(md_method method);
MD_API md_status md_method_from_name(const char* name, md_method* out);
MD_API void md_string_free(char* s);

/* ---- datasets ---------------------------------------------------------- */

typedef struct md_gen_params {
  int32_t classes;
  int32_t per_class;
  int32_t input_dim;
  double noise_sigma;
  uint64_t seed;
} md_gen_params;

typedef struct md_dataset_info {
  uint64_t samples;
  uint64_t train_samples;
  uint64_t eval_samples;
  int32_t input_dim;
  int32_t classes;
  uint64_t seed;
  double noise_sigma;
} md_dataset_info;

MD_API void md_gen_params_default(md_gen_params* params);
MD_API md_status md_dataset_generate(const md_gen_params* params, md_dataset** out);
MD_API md_status md_dataset_load(const char* path, md_dataset** out);
MD_API md_status md_dataset_save(const md_dataset* dataset, const char* path);
MD_API md_status md_dataset_get_info(const md_dataset* dataset, md_dataset_info* info);
MD_API void md_dataset_free(md_dataset* dataset);

/* ---- training ---------------------------------------------------------- */

typedef struct md_train_config {
  md_method method;
  int32_t batch_size;
  int64_t iterations;
  uint64_t seed;
  int32_t hidden[MD_MAX_HIDDEN];
  int32_t num_hidden;
  int32_t embedding_dim;
  double m1, m2, m3, s;
  double m_min, m_max;
  int32_t global_a_max;
  double temperature;
  double kd_hard_weight;
  double lambda_angular;
  int32_t triplet_per_class;
  double base_lr;
  double momentum;
  double weight_decay;
  double decay_factor;
  int64_t milestones[MD_MAX_MILESTONES];
  int32_t num_milestones;
} md_train_config;

MD_API void md_train_config_teacher_default(md_train_config* config);
MD_API void md_train_config_student_default(md_train_config* config, md_method method);

/* metrics_path may be NULL; otherwise one JSON line per iteration. */
MD_API md_status md_train_teacher(const md_dataset* dataset,
                                  const md_train_config* config,
                                  const char* metrics_path, md_checkpoint** out);
/* teacher may be NULL only for MD_METHOD_ARCFACE. */
MD_API md_status md_distill(const md_dataset* dataset, const md_checkpoint* teacher,
                            const md_train_config* config, const char* metrics_path,
                            md_checkpoint** out);

typedef struct md_checkpoint_info {
  md_role role;
  uint32_t format_version;
  int32_t input_dim;
  int32_t embedding_dim;
  int32_t num_layers;
  int32_t classes;
  int32_t centers_frozen;
  int64_t iterations;
  double final_loss;
  uint64_t seed;
  char method[32];
} md_checkpoint_info;

MD_API md_status md_checkpoint_load(const char* path, md_checkpoint** out);
MD_API md_status md_checkpoint_save(const md_checkpoint* checkpoint, const char* path);
MD_API md_status md_checkpoint_get_info(const md_checkpoint* checkpoint,
                                        md_checkpoint_info* info);
/* Copies the D x n centers, row-major, into out (capacity in doubles). */
MD_API md_status md_checkpoint_get_centers(const md_checkpoint* checkpoint,
                                           double* out, size_t capacity);
MD_API void md_checkpoint_free(md_checkpoint* checkpoint);

/* ---- evaluation -------------------------------------------------------- */

typedef struct md_protocol_params {
  uint64_t positive_pairs;   /* MD_AUTO: min(3000, available) */
  uint64_t negative_pairs;   /* MD_AUTO: min(3000, available) */
  uint64_t probe_identities; /* MD_AUTO: min(100, eligible / 2) */
  uint64_t distractors;      /* MD_AUTO: min(10000, available) */
  uint64_t seed;
} md_protocol_params;

typedef struct md_report_values {
  double verification_accuracy;
  double best_threshold;
  double rank1_accuracy;
  uint64_t seed;
  double timing_seconds;
  char method[32];
  char protocol[32];
} md_report_values;

MD_API void md_protocol_params_default(md_protocol_params* params);
/* label names the report row; NULL uses "teacher" for teachers and the
 * training method for students. */
MD_API md_status md_evaluate(const md_checkpoint* checkpoint, const md_dataset* dataset,
                             const md_protocol_params* params, const char* label,
                             md_report** out);
MD_API md_status md_report_get(const md_report* report, md_report_values* values);
MD_API md_status md_report_save_json(const md_report* report, const char* path);
MD_API md_status md_report_save_csv(const md_report* report, const char* path);
MD_API md_status md_report_load_json(const char* path, md_report** out);
MD_API void md_report_free(md_report* report);

/* Comparison table (teacher + students) as CSV and aligned text. Both outputs
 * are malloc'd and released with md_string_free; either may be NULL. */
MD_API md_status md_gap_report(const md_report* teacher,
                               const md_report* const* students, size_t num_students,
                               int with_header, char** csv_out, char** text_out);
/* Per-method mean and sample standard deviation across reports. */
MD_API md_status md_aggregate(const md_report* const* reports, size_t num_reports,
                              char** csv_out, char** text_out);

#ifdef __cplusplus
}
#endif

#endif  /* MARGINDISTILL_H_ */
