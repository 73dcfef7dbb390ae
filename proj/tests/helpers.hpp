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

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "sdtlab/backbone.hpp"
#include "sdtlab/phantom.hpp"
#include "sdtlab/tensor.hpp"
#include "sdtlab/trainer.hpp"

namespace sdtlab::testing {

// Small architecture used wherever the full network would only slow a test
// down. Same topology, narrower layers.
inline std::vector<int> tiny_widths() { return {4, 4, 8, 8, 8}; }

inline BackboneConfig tiny_backbone(int classes = 4,
                                    ComputePrecision p = ComputePrecision::kFloat64) {
  BackboneConfig c;
  c.num_classes = classes;
  c.widths = tiny_widths();
  c.norm_groups = 2;
  c.precision = p;
  return c;
}

inline TrainConfig tiny_train_config(int64_t total, int64_t warmup) {
  TrainConfig c;
  c.total_iters = total;
  c.warmup_iters = warmup;
  c.batch_size = 2;
  c.widths = tiny_widths();
  c.norm_groups = 2;
  c.precision = ComputePrecision::kFloat64;
  return c;
}

inline Dataset tiny_dataset(int n_train = 6, int n_val = 2, int n_test = 2, int size = 32,
                            uint64_t seed = 0) {
  DatasetSpec spec;
  spec.image_size = size;
  spec.n_train = n_train;
  spec.n_val = n_val;
  spec.n_test = n_test;
  spec.seed = seed;
  return generate_dataset(spec);
}

inline TensorD random_normal(const Shape& shape, uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, sd);
  TensorD t(shape);
  for (auto& v : t.span()) v = nd(rng);
  return t;
}

// Softmax over axis 1 written independently of the library.
inline TensorD reference_softmax(const TensorD& logits) {
  const int64_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  TensorD p(logits.shape());
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t i = 0; i < hw; ++i) {
      double mx = -INFINITY;
      for (int64_t c = 0; c < k; ++c) mx = std::max(mx, logits[(b * k + c) * hw + i]);
      double z = 0.0;
      for (int64_t c = 0; c < k; ++c) z += std::exp(logits[(b * k + c) * hw + i] - mx);
      for (int64_t c = 0; c < k; ++c) p[(b * k + c) * hw + i] = std::exp(logits[(b * k + c) * hw + i] - mx) / z;
    }
  }
  return p;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("sdtlab_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace sdtlab::testing
