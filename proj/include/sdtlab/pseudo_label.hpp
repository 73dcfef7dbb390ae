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

#include "sdtlab/tensor.hpp"

namespace sdtlab {

enum class Teacher { kT1, kT2 };

inline const char* teacher_name(Teacher t) { return t == Teacher::kT1 ? "T1" : "T2"; }

// Confidence-filtered hard labels produced from a teacher's softmax output.
struct PseudoLabelMap {
  LabelMap labels;           // N×H×W argmax class of every pixel
  Tensor<uint8_t> reliable;  // N×H×W, 1 where the pixel is kept
  double threshold = 0.0;

  double reliable_fraction() const;
  // Labels with unreliable pixels set to kIgnore.
  LabelMap as_label_map() const;
};

}  // namespace sdtlab
