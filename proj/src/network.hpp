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
#include <string>
#include <vector>

#include "geometry.hpp"

namespace md {

// Fully connected embedder: ReLU between layers, linear last layer, then
// row-wise L2 normalization. layer_dims = {D_in, h_1, ..., h_k, D}; a single
// entry describes the identity map.
struct MlpParams {
  std::vector<int> layer_dims;
  std::vector<Matrix> weights;  // weights[l]: layer_dims[l+1] x layer_dims[l]
  std::vector<Vector> biases;   // biases[l]: layer_dims[l+1]

  int input_dim() const { return layer_dims.front(); }
  int embedding_dim() const { return layer_dims.back(); }
  std::size_t num_layers() const { return weights.size(); }

  // Throws kShapeMismatch on violation.
  void validate() const;
};

struct MlpGrads {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
};

struct ForwardCache {
  std::vector<Matrix> layer_inputs;     // input to each layer, N x dims[l]
  std::vector<Matrix> pre_activations;  // N x dims[l+1]
  Matrix raw_output;                    // pre-normalization embedding
  std::vector<double> norms;            // row norms of raw_output
};

struct ForwardResult {
  EmbeddingBatch embeddings;
  ForwardCache cache;
};

std::vector<int> teacher_dims(int input_dim, int embedding_dim);
std::vector<int> student_dims(int input_dim, int embedding_dim);

// Glorot-uniform weights, zero biases.
MlpParams init_mlp(const std::vector<int>& layer_dims, std::uint64_t seed);

ForwardResult mlp_forward(const MlpParams& params, const Matrix& inputs);

// Embeddings only, skipping the cache.
EmbeddingBatch mlp_embed(const MlpParams& params, const Matrix& inputs);

// Gradient of the loss given dL/d(unit embeddings).
MlpGrads mlp_backward(const MlpParams& params, const ForwardCache& cache,
                      const Matrix& grad_embeddings);

// Same, but grad_raw_output is taken with respect to the pre-normalization
// output, i.e. the normalization layer is bypassed.
MlpGrads mlp_backward_raw(const MlpParams& params, const ForwardCache& cache,
                          const Matrix& grad_raw_output);

enum class Role { kTeacher, kStudent };

std::string role_name(Role role);

struct TrainingMeta {
  std::int64_t iterations = 0;
  double final_loss = 0.0;
  std::uint64_t seed = 0;
  std::string method;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  Role role = Role::kTeacher;
  MlpParams params;
  ClassCenters centers;
  TrainingMeta meta;
};

std::string checkpoint_to_bytes(const Checkpoint& ck);
Checkpoint checkpoint_from_bytes(const std::string& bytes);

void checkpoint_save(const Checkpoint& ck, const std::string& path);
Checkpoint checkpoint_load(const std::string& path);

}  // namespace md
