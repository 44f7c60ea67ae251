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

#include "network.hpp"

#include <cmath>
#include <string_view>

#include <json.hpp>

#include "binary_io.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace md {

namespace {

constexpr std::string_view kCheckpointMagic{"MDCKPT\0\0", 8};
constexpr std::uint64_t kInitStream = 0x696E6974;  // "init"

}  // namespace

void MlpParams::validate() const {
  require(!layer_dims.empty(), ErrorCode::kShapeMismatch, "layer_dims is empty");
  for (int d : layer_dims) {
    require(d >= 1, ErrorCode::kShapeMismatch, "layer width must be >= 1");
  }
  require(weights.size() + 1 == layer_dims.size() &&
              biases.size() == weights.size(),
          ErrorCode::kShapeMismatch, "layer count does not match layer_dims");
  for (std::size_t l = 0; l < weights.size(); ++l) {
    require(weights[l].rows() == layer_dims[l + 1] &&
                weights[l].cols() == layer_dims[l] &&
                biases[l].size() == layer_dims[l + 1],
            ErrorCode::kShapeMismatch,
            "layer " + std::to_string(l) + " has inconsistent shape");
    require(weights[l].allFinite() && biases[l].allFinite(),
            ErrorCode::kShapeMismatch,
            "layer " + std::to_string(l) + " holds non-finite values");
  }
}

std::vector<int> teacher_dims(int input_dim, int embedding_dim) {
  return {input_dim, 256, 256, embedding_dim};
}

std::vector<int> student_dims(int input_dim, int embedding_dim) {
  return {input_dim, 32, embedding_dim};
}

MlpParams init_mlp(const std::vector<int>& layer_dims, std::uint64_t seed) {
  MlpParams p;
  p.layer_dims = layer_dims;
  require(!layer_dims.empty(), ErrorCode::kInvalidConfig, "layer_dims is empty");
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
    const int fan_in = layer_dims[l];
    const int fan_out = layer_dims[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    RngStream rng(derive_key(seed, kInitStream, l));
    Matrix w(fan_out, fan_in);
    // Row-major fill so the draw order does not depend on Eigen storage.
    for (int r = 0; r < fan_out; ++r) {
      for (int c = 0; c < fan_in; ++c) w(r, c) = rng.uniform(-limit, limit);
    }
    p.weights.push_back(std::move(w));
    p.biases.push_back(Vector::Zero(fan_out));
  }
  p.validate();
  return p;
}

ForwardResult mlp_forward(const MlpParams& params, const Matrix& inputs) {
  require(inputs.cols() == params.input_dim(), ErrorCode::kDimensionMismatch,
          "input width " + std::to_string(inputs.cols()) + " != layer_dims[0] " +
              std::to_string(params.input_dim()));
  ForwardCache cache;
  Matrix a = inputs;
  const std::size_t layers = params.num_layers();
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix h = a * params.weights[l].transpose();
    h.rowwise() += params.biases[l].transpose();
    cache.layer_inputs.push_back(std::move(a));
    if (l + 1 < layers) {
      a = h.cwiseMax(0.0);
    } else {
      a = h;
    }
    cache.pre_activations.push_back(std::move(h));
  }
  cache.raw_output = std::move(a);
  Matrix unit = normalize_rows(cache.raw_output, &cache.norms);
  return ForwardResult{EmbeddingBatch(std::move(unit)), std::move(cache)};
}

EmbeddingBatch mlp_embed(const MlpParams& params, const Matrix& inputs) {
  return mlp_forward(params, inputs).embeddings;
}

MlpGrads mlp_backward_raw(const MlpParams& params, const ForwardCache& cache,
                          const Matrix& grad_raw_output) {
  const std::size_t layers = params.num_layers();
  require(cache.layer_inputs.size() == layers &&
              cache.pre_activations.size() == layers,
          ErrorCode::kShapeMismatch, "forward cache does not match params");
  require(grad_raw_output.rows() == cache.raw_output.rows() &&
              grad_raw_output.cols() == cache.raw_output.cols(),
          ErrorCode::kShapeMismatch, "output gradient shape mismatch");
  MlpGrads grads;
  grads.weights.resize(layers);
  grads.biases.resize(layers);
  Matrix g = grad_raw_output;
  for (std::size_t l = layers; l-- > 0;) {
    if (l + 1 < layers) {
      // ReLU subgradient at 0 is 0.
      g = (cache.pre_activations[l].array() > 0.0).select(g, 0.0);
    }
    grads.weights[l] = g.transpose() * cache.layer_inputs[l];
    grads.biases[l] = g.colwise().sum().transpose();
    if (l > 0) g = g * params.weights[l];
  }
  return grads;
}

MlpGrads mlp_backward(const MlpParams& params, const ForwardCache& cache,
                      const Matrix& grad_embeddings) {
  require(grad_embeddings.rows() == cache.raw_output.rows() &&
              grad_embeddings.cols() == cache.raw_output.cols(),
          ErrorCode::kShapeMismatch, "embedding gradient shape mismatch");
  Matrix unit = cache.raw_output;
  for (Eigen::Index i = 0; i < unit.rows(); ++i) {
    unit.row(i) /= cache.norms[static_cast<std::size_t>(i)];
  }
  return mlp_backward_raw(
      params, cache, normalize_rows_backward(unit, grad_embeddings, cache.norms));
}

std::string role_name(Role role) {
  return role == Role::kTeacher ? "teacher" : "student";
}

namespace {

void put_matrix_row_major(std::string& out, const Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) io::put_le<double>(out, m(r, c));
  }
}

Matrix get_matrix_row_major(io::ByteReader& in, Eigen::Index rows,
                            Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = in.get_le<double>();
  }
  return m;
}

[[noreturn]] void corrupt(const std::string& what) {
  fail(ErrorCode::kCorruptCheckpoint, "corrupt checkpoint: " + what);
}

}  // namespace

std::string checkpoint_to_bytes(const Checkpoint& ck) {
  ck.params.validate();
  require(ck.centers.dim() == ck.params.embedding_dim(),
          ErrorCode::kDimensionMismatch,
          "center dimension does not match embedding dimension");
  nlohmann::json meta = {
      {"role", role_name(ck.role)},
      {"layer_dims", ck.params.layer_dims},
      {"embedding_dim", ck.params.embedding_dim()},
      {"num_classes", ck.centers.num_classes()},
      {"centers_frozen", ck.centers.frozen()},
      {"layout", "per layer: weights row-major, bias; then centers row-major"},
      {"training_meta",
       {{"iterations", ck.meta.iterations},
        {"final_loss", ck.meta.final_loss},
        {"seed", ck.meta.seed},
        {"method", ck.meta.method}}},
  };
  const std::string json = meta.dump();
  std::string out(kCheckpointMagic);
  io::put_le<std::uint32_t>(out, ck.format_version);
  io::put_le<std::uint64_t>(out, json.size());
  out += json;
  for (std::size_t l = 0; l < ck.params.num_layers(); ++l) {
    put_matrix_row_major(out, ck.params.weights[l]);
    for (Eigen::Index i = 0; i < ck.params.biases[l].size(); ++i) {
      io::put_le<double>(out, ck.params.biases[l](i));
    }
  }
  put_matrix_row_major(out, ck.centers.matrix());
  return out;
}

Checkpoint checkpoint_from_bytes(const std::string& bytes) {
  io::ByteReader in(bytes, ErrorCode::kCorruptCheckpoint);
  if (in.take(kCheckpointMagic.size()) != kCheckpointMagic) corrupt("bad magic");
  const auto version = in.get_le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    corrupt("unsupported format version " + std::to_string(version) +
            " (supported: " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto json_len = in.get_le<std::uint64_t>();
  if (json_len > in.remaining()) corrupt("metadata length exceeds file size");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in.take(static_cast<std::size_t>(json_len)));
  } catch (const nlohmann::json::exception& e) {
    corrupt(std::string("metadata is not valid JSON: ") + e.what());
  }

  Checkpoint ck{.format_version = version,
                .role = Role::kTeacher,
                .params = {},
                .centers = ClassCenters(Matrix::Identity(2, 1)),
                .meta = {}};
  bool frozen = false;
  Eigen::Index num_classes = 0;
  try {
    const std::string role = meta.at("role").get<std::string>();
    if (role == "teacher") {
      ck.role = Role::kTeacher;
    } else if (role == "student") {
      ck.role = Role::kStudent;
    } else {
      corrupt("unknown role '" + role + "'");
    }
    ck.params.layer_dims = meta.at("layer_dims").get<std::vector<int>>();
    num_classes = meta.at("num_classes").get<Eigen::Index>();
    frozen = meta.at("centers_frozen").get<bool>();
    const auto& tm = meta.at("training_meta");
    ck.meta.iterations = tm.at("iterations").get<std::int64_t>();
    ck.meta.final_loss = tm.at("final_loss").get<double>();
    ck.meta.seed = tm.at("seed").get<std::uint64_t>();
    ck.meta.method = tm.at("method").get<std::string>();
    if (meta.at("embedding_dim").get<int>() != ck.params.layer_dims.back()) {
      corrupt("embedding_dim disagrees with layer_dims");
    }
  } catch (const nlohmann::json::exception& e) {
    corrupt(std::string("bad metadata: ") + e.what());
  }
  const auto& dims = ck.params.layer_dims;
  if (dims.empty() || num_classes < 1 || dims.back() < 2) {
    corrupt("invalid shape declaration");
  }
  std::uint64_t expected = 0;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    if (dims[l] < 1 || dims[l + 1] < 1) corrupt("invalid layer width");
    expected += static_cast<std::uint64_t>(dims[l + 1]) * (dims[l] + 1);
  }
  expected += static_cast<std::uint64_t>(dims.back()) * num_classes;
  if (in.remaining() != expected * sizeof(double)) {
    corrupt("payload holds " + std::to_string(in.remaining()) +
            " bytes, expected " + std::to_string(expected * sizeof(double)));
  }
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    ck.params.weights.push_back(get_matrix_row_major(in, dims[l + 1], dims[l]));
    Vector b(dims[l + 1]);
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = in.get_le<double>();
    ck.params.biases.push_back(std::move(b));
  }
  Matrix centers = get_matrix_row_major(in, dims.back(), num_classes);
  try {
    ck.params.validate();
    ck.centers = ClassCenters(std::move(centers), frozen);
  } catch (const Error& e) {
    corrupt(e.what());
  }
  return ck;
}

void checkpoint_save(const Checkpoint& ck, const std::string& path) {
  io::write_file(path, checkpoint_to_bytes(ck));
}

Checkpoint checkpoint_load(const std::string& path) {
  return checkpoint_from_bytes(io::read_file(path));
}

}  // namespace md
