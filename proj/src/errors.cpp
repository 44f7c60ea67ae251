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

#include "errors.hpp"

namespace md {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kZeroNorm: return "E_ZERO_NORM";
    case ErrorCode::kDimensionMismatch: return "E_DIM_MISMATCH";
    case ErrorCode::kShapeMismatch: return "E_SHAPE_MISMATCH";
    case ErrorCode::kLabelOutOfRange: return "E_LABEL_OUT_OF_RANGE";
    case ErrorCode::kEmptyBatch: return "E_EMPTY_BATCH";
    case ErrorCode::kNonPositiveTemperature: return "E_NONPOSITIVE_TEMPERATURE";
    case ErrorCode::kInvalidConfig: return "E_INVALID_CONFIG";
    case ErrorCode::kIoFailure: return "E_IO_FAILURE";
    case ErrorCode::kCorruptCheckpoint: return "E_CORRUPT_CHECKPOINT";
    case ErrorCode::kCorruptDataset: return "E_CORRUPT_DATASET";
    case ErrorCode::kInsufficientSamples: return "E_INSUFFICIENT_SAMPLES";
    case ErrorCode::kEmptyProtocol: return "E_EMPTY_PROTOCOL";
    case ErrorCode::kProtocolMismatch: return "E_PROTOCOL_MISMATCH";
    case ErrorCode::kMissingTeacher: return "E_MISSING_TEACHER";
    case ErrorCode::kDivergedLoss: return "E_DIVERGED_LOSS";
  }
  return "E_UNKNOWN";
}

}  // namespace md
