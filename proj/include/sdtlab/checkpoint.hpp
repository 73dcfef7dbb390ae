/* Copyright 2026 The sdtlab Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdtlab/backbone.hpp"

namespace sdtlab {

// Checkpoint layout:
//   8 bytes  magic "SDTCKPT\0"
//   8 bytes  little-endian uint64 header length L
//   L bytes  JSON header: format_version, fingerprint, backbone config,
//            tensors [{name, shape, dtype, offset, nbytes}], metadata
//   payload  concatenated little-endian tensors; offsets are relative to the
//            start of the payload
// Tensor names are "<section>/<parameter>", so one file can hold several
// networks of the same architecture (student, teachers, optimizer state).

inline constexpr int kCheckpointFormatVersion = 1;

enum class Dtype { kFloat32, kFloat64 };

const char* dtype_name(Dtype d);

struct CheckpointSection {
  std::string name;
  NetworkWeights weights;
};

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<CheckpointSection> sections;

  const NetworkWeights& section(const std::string& name) const;
  bool has_section(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, const NetworkWeights*>>& sections,
                     const nlohmann::json& metadata = nlohmann::json::object(),
                     Dtype dtype = Dtype::kFloat32);

Checkpoint load_checkpoint(const std::filesystem::path& path);

// Single-network convenience wrappers (section "model").
void save_weights(const std::filesystem::path& path, const NetworkWeights& weights,
                  Dtype dtype = Dtype::kFloat32);
// Loads `section`, or the first section when empty.
NetworkWeights load_weights(const std::filesystem::path& path, const std::string& section = "");

nlohmann::json backbone_config_to_json(const BackboneConfig& config);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);

}  // namespace sdtlab
