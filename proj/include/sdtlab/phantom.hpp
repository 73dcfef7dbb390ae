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
#include <filesystem>
#include <string>
#include <vector>

#include "sdtlab/random.hpp"
#include "sdtlab/tensor.hpp"

namespace sdtlab {

// Class indices used by the phantom generator.
inline constexpr uint8_t kBackground = 0;
inline constexpr uint8_t kRightVentricle = 1;
inline constexpr uint8_t kMyocardium = 2;
inline constexpr uint8_t kLeftVentricle = 3;

enum class Split { kTrain, kVal, kTest };

const char* split_name(Split split);
Split parse_split(const std::string& name);

struct DatasetSpec {
  int num_classes = 4;
  int image_size = 64;
  int n_train = 0;
  int n_val = 0;
  int n_test = 0;
  uint64_t seed = 0;
  // Upper bound on the annotated pixel fraction of a scribble map.
  double max_scribble_fraction = 0.2;

  void validate() const;  // throws ConfigError
  int total() const { return n_train + n_val + n_test; }
  // Split and within-split position of a global sample index.
  std::pair<Split, int> locate(int index) const;
  std::string sample_id(int index) const;
};

// One 2D slice. Image is H×W in [0,1]; mask and scribble are H×W labels.
struct PhantomSample {
  std::string id;
  TensorF image;
  Tensor<uint8_t> mask;
  Tensor<uint8_t> scribble;

  int height() const { return static_cast<int>(image.dim(0)); }
  int width() const { return static_cast<int>(image.dim(1)); }
  friend bool operator==(const PhantomSample&, const PhantomSample&) = default;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<PhantomSample> train;
  std::vector<PhantomSample> val;
  std::vector<PhantomSample> test;

  const std::vector<PhantomSample>& split(Split s) const;
  std::vector<PhantomSample>& split(Split s);
};

PhantomSample generate_phantom(const DatasetSpec& spec, int index);
Dataset generate_dataset(const DatasetSpec& spec);

// Skeleton-based strokes per class, jittered by a short random walk and kept
// inside the class region. Unlabeled pixels are kIgnore.
Tensor<uint8_t> synthesize_scribbles(const Tensor<uint8_t>& dense_mask, int num_classes, Rng& rng,
                                     double max_fraction = 0.2);

// Zhang-Suen thinning of a binary H×W region. Pixels outside the image count as
// background.
Tensor<uint8_t> skeletonize(const Tensor<uint8_t>& region);

struct AugmentOptions {
  bool right_angle_rotation = true;
  bool flips = true;
  double continuous_rotation_prob = 0.0;
  double max_rotation_deg = 20.0;
};

struct SpatialTransform {
  int quarter_turns = 0;  // counter-clockwise, 0..3
  bool flip_horizontal = false;
  bool flip_vertical = false;
  double angle_deg = 0.0;  // continuous rotation applied last

  bool is_identity() const {
    return quarter_turns % 4 == 0 && !flip_horizontal && !flip_vertical && angle_deg == 0.0;
  }
};

SpatialTransform draw_transform(Rng& rng, const AugmentOptions& options = {});

// For the discrete part of a transform (quarter turns and flips), the source
// index of every destination pixel in an H×W plane.
std::vector<int64_t> pixel_permutation(int height, int width, const SpatialTransform& transform);

// Applies one transform jointly to image, mask and scribble. Labels are
// resampled nearest-neighbour, the image bilinearly.
PhantomSample apply_transform(const PhantomSample& sample, const SpatialTransform& transform);

PhantomSample augment(const PhantomSample& sample, Rng& rng, const AugmentOptions& options = {});

inline constexpr int kDatasetFormatVersion = 1;

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

// FNV-1a over the canonical byte content of every sample.
uint64_t dataset_fingerprint(const Dataset& dataset);

// Labeled (non-ignore) pixel count.
int64_t count_labeled(const Tensor<uint8_t>& scribble);

}  // namespace sdtlab
