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
#include <utility>
#include <vector>

#include "sdtlab/backbone.hpp"
#include "sdtlab/losses.hpp"
#include "sdtlab/pseudo_label.hpp"

namespace sdtlab {

struct SelectionRecord {
  int64_t iteration = 0;
  Teacher selected = Teacher::kT2;
  double loss_t1 = 0.0;
  double loss_t2 = 0.0;

  friend bool operator==(const SelectionRecord&, const SelectionRecord&) = default;
};

// Two EMA teachers sharing the student's architecture. Single writer: only
// the training loop mutates it.
struct TeacherEnsemble {
  NetworkWeights t1;
  NetworkWeights t2;
  double ema_decay = 0.999;
  std::vector<SelectionRecord> selection_log;

  NetworkWeights& get(Teacher t) { return t == Teacher::kT1 ? t1 : t2; }
  const NetworkWeights& get(Teacher t) const { return t == Teacher::kT1 ? t1 : t2; }
};

// Scribble loss of each teacher's probabilities over the whole batch.
std::pair<double, double> score_teachers(const TensorD& probs_t1, const TensorD& probs_t2,
                                         const LabelMap& scribble, PceOptions options = {});

// T1 iff loss_t1 < loss_t2; ties go to T2. NaN scores throw NumericalError.
Teacher select_teacher(double loss_t1, double loss_t2);

// Keeps pixels whose maximum class probability is >= tau; labels are the
// argmax with ties resolved to the lowest class index.
PseudoLabelMap pick_reliable_pixels(const TensorD& probs, double tau);

// θ_T ← α·θ_T + (1−α)·θ_S for every parameter.
void ema_update(NetworkWeights& teacher, const NetworkWeights& student, double alpha);

struct DtsResult {
  PseudoLabelMap pseudo;
  FeatureTaps taps;      // of the selected teacher
  TensorD teacher_probs;  // softmax of the selected teacher's logits
  SelectionRecord record;
};

struct DtsOptions {
  double tau = 0.5;
  // Choose a teacher per sample for pseudo-labels and taps. The batch-level
  // choice still decides which teacher receives the EMA update.
  bool per_sample = false;
  PceOptions pce;
};

// Scores both teachers on the scribbles, selects one, filters its softmax
// output into pseudo-labels and appends the choice to the selection log.
DtsResult dts_step(TeacherEnsemble& ensemble, const ModelOutput& student,
                   const ModelOutput& teacher1, const ModelOutput& teacher2,
                   const LabelMap& scribble, int64_t iteration, const DtsOptions& options = {});

// iteration,selected,L_T1,L_T2
void write_selection_csv(const std::filesystem::path& path,
                         const std::vector<SelectionRecord>& log);

}  // namespace sdtlab
