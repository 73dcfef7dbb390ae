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

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "sdtlab/tensor.hpp"

namespace sdtlab {

// Arithmetic used inside forward/backward. Parameters are always held in
// double; float32 compute casts them per call.
enum class ComputePrecision { kFloat32, kFloat64 };

struct BackboneConfig {
  int in_channels = 1;
  int num_classes = 4;
  std::vector<int> widths{16, 32, 64, 128, 256};
  // Group normalization; the group count is reduced per layer until it
  // divides the channel count.
  int norm_groups = 4;
  // Execution option, not part of the architecture fingerprint.
  ComputePrecision precision = ComputePrecision::kFloat32;

  void validate() const;  // throws ConfigError
  int levels() const { return static_cast<int>(widths.size()); }
  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

struct ParamTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;

  friend bool operator==(const ParamTensor&, const ParamTensor&) = default;
};

// Ordered name → parameter array collection plus the architecture it
// belongs to. Also used as the container for gradients and optimizer state.
class NetworkWeights {
 public:
  NetworkWeights() = default;
  NetworkWeights(BackboneConfig config, std::vector<ParamTensor> params);

  const BackboneConfig& config() const { return config_; }
  // Precision is an execution setting, so changing it keeps the fingerprint.
  void set_precision(ComputePrecision p) { config_.precision = p; }
  uint64_t fingerprint() const { return fingerprint_; }

  const std::vector<ParamTensor>& params() const { return params_; }
  std::vector<ParamTensor>& params() { return params_; }
  const ParamTensor& param(std::string_view name) const;
  ParamTensor& param(std::string_view name);

  int64_t num_parameters() const;
  bool empty() const { return params_.empty(); }

  // Same fingerprint and bit-identical values.
  friend bool operator==(const NetworkWeights& a, const NetworkWeights& b) {
    return a.fingerprint_ == b.fingerprint_ && a.params_ == b.params_;
  }

 private:
  BackboneConfig config_;
  std::vector<ParamTensor> params_;
  uint64_t fingerprint_ = 0;
};

// Hash over the architecture fields and the ordered (name, shape) list.
uint64_t architecture_fingerprint(const BackboneConfig& config,
                                  const std::vector<ParamTensor>& params);

NetworkWeights zeros_like(const NetworkWeights& w);
NetworkWeights copy_weights(const NetworkWeights& src);

struct FeatureTaps {
  TensorD low;   // N×widths[0]×H×W, output of the last decoder block
  TensorD high;  // N×widths[3]×(H/8)×(W/8), output of the deepest decoder block
};

struct ModelOutput {
  TensorD logits;  // N×K×H×W
  FeatureTaps taps;
};

NetworkWeights build(const BackboneConfig& config, uint64_t seed);

// Inference pass. Images are N×in_channels×H×W with H, W divisible by 16.
// Keeps no gradient state.
ModelOutput forward(const NetworkWeights& weights, const TensorF& images);

// Training-mode pass. Retains the activations needed to backpropagate
// gradients on the logits and on both feature taps. The weights must outlive
// the pass and must not change while it exists.
class TrainingPass {
 public:
  TrainingPass(const NetworkWeights& weights, const TensorF& images);
  ~TrainingPass();
  TrainingPass(TrainingPass&&) noexcept;
  TrainingPass& operator=(TrainingPass&&) noexcept;

  const ModelOutput& output() const;

  // Gradients of the loss w.r.t. every parameter. d_low / d_high may be null.
  NetworkWeights backward(const TensorD& d_logits, const TensorD* d_low = nullptr,
                          const TensorD* d_high = nullptr) const;

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

}  // namespace sdtlab
