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

#include <optional>

#include "sdtlab/backbone.hpp"
#include "sdtlab/pseudo_label.hpp"
#include "sdtlab/tensor.hpp"

namespace sdtlab {

// Probability clamp in the cross-entropy terms.
inline constexpr double kProbEps = 1e-8;
// Smoothing in the soft Dice ratio.
inline constexpr double kDiceEps = 1e-5;

// Where a loss deposits its gradient. When `grad` is set, scale·dL/dx is added
// to it; an empty tensor is first resized to the input shape.
struct GradSink {
  TensorD* grad = nullptr;
  double scale = 1.0;
};

struct PceOptions {
  // Sum over annotated pixels instead of the mean.
  bool unnormalized = false;
};

// Softmax over the channel axis of an N×K×H×W tensor.
TensorD softmax(const TensorD& logits);
// Gradient w.r.t. the logits given probs = softmax(logits) and dL/dprobs.
TensorD softmax_backward(const TensorD& probs, const TensorD& d_probs);

// Partial cross-entropy: mean of −log p(label) over pixels whose label is not
// kIgnore. Zero when nothing is annotated.
double pce_loss(const TensorD& probs, const LabelMap& labels, GradSink sink = {},
                PceOptions options = {});

// Cross-entropy over the pixels selected by `mask` (labels must be valid there).
double masked_ce_loss(const TensorD& probs, const LabelMap& labels, const Tensor<uint8_t>& mask,
                      GradSink sink = {});

// 1 − class-averaged soft Dice with sums restricted to the masked pixels.
// Classes with no mass in either the masked labels or the masked
// probabilities are left out of the average. Zero on an empty mask.
double masked_dice_loss(const TensorD& probs, const LabelMap& labels,
                        const Tensor<uint8_t>& reliable, GradSink sink = {});

// ½(masked CE + masked Dice) on the reliable pixels of `pl`.
double pseudo_loss(const TensorD& student_probs, const PseudoLabelMap& pl, GradSink sink = {});

// ½(mean |f_s − f_t| + mean over the batch of (1 − cos)), cosine taken per
// sample over the flattened features. A zero-norm vector has cos = 0.
// Gradients flow to f_s only.
double feature_consistency(const TensorD& f_s, const TensorD& f_t, GradSink sink = {});

// Average of feature_consistency over the low- and high-level taps.
double hico_loss(const FeatureTaps& student, const FeatureTaps& teacher, GradSink low = {},
                 GradSink high = {});

struct LossBreakdown {
  double scribble = 0.0;
  double pseudo = 0.0;
  double hico = 0.0;
  double total = 0.0;
  double reliable_fraction = 0.0;
  std::optional<Teacher> selected;
};

// Sums the three terms as (scribble + pseudo) + hico. Throws NumericalError
// naming the first non-finite component.
LossBreakdown total_loss(double scribble, double pseudo, double hico);

}  // namespace sdtlab
