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
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdtlab/backbone.hpp"
#include "sdtlab/phantom.hpp"
#include "sdtlab/pseudo_label.hpp"
#include "sdtlab/trainer.hpp"

namespace sdtlab {

// Foreground-class Dice. Classes absent from both masks are left out of
// per_class and of the mean.
struct DiceReport {
  std::map<int, double> per_class;
  double mean = 0.0;
  int64_t samples = 0;
};

DiceReport dice_score(const LabelMap& pred, const LabelMap& truth, int num_classes);

// Per-class Dice averaged over the samples where the class is scored; the
// mean is taken over those per-class averages.
DiceReport aggregate_dice(const std::vector<DiceReport>& per_sample, int num_classes);

// Argmax of the student softmax for each slice of a D×H×W volume, one slice
// at a time. Ties resolve to the lowest class index.
LabelMap evaluate_volume(const NetworkWeights& weights, const TensorF& volume);

DiceReport evaluate_samples(const NetworkWeights& weights, const std::vector<PhantomSample>& samples);

nlohmann::json dice_to_json(const DiceReport& report);

// Pseudo-labels and features from the average of both teachers. This is the
// "Avg" baseline of the ablation, not part of dynamic switching.
struct AvgPolicyResult {
  PseudoLabelMap pseudo;
  FeatureTaps taps;
  TensorD probs;
};
AvgPolicyResult avg_policy(const ModelOutput& teacher1, const ModelOutput& teacher2, double tau);

struct AblationRow {
  TeacherMode teachers = TeacherMode::kDual;
  PseudoPolicy policy = PseudoPolicy::kDts;
  bool prp = true;
  bool hico = true;
  DiceReport dice;
  // Hash of the dataset bytes, seed and every shared setting this row used.
  uint64_t fairness = 0;
};

struct AblationGrid {
  std::vector<AblationRow> rows;
  uint64_t fairness = 0;
  bool fair = false;  // every row carries the same fairness hash
};

// The seven component configurations, in table order.
std::vector<AblationRow> ablation_rows();

// Fingerprint of the data plus the config with the ablation switches cleared.
uint64_t fairness_hash(const TrainConfig& config, const Dataset& dataset);

// Trains every row with the base config and identical data/seed, then
// evaluates the last weights on the test split. Writes ablation.csv and
// ablation.md (plus one run directory per row) into out_dir.
AblationGrid run_ablation(const TrainConfig& base, const Dataset& dataset,
                          const std::filesystem::path& out_dir);
AblationGrid run_ablation(const TrainConfig& base, const std::filesystem::path& dataset_dir,
                          const std::filesystem::path& out_dir);
std::string render_ablation_markdown(const AblationGrid& grid);

struct GradcheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  int trials = 0;
  int64_t checked = 0;  // coordinates compared
  int64_t skipped = 0;  // L1 kinks closer than the step
  bool passed = false;
};

struct GradcheckReport {
  double tolerance = 1e-4;
  double step = 1e-5;
  std::vector<GradcheckEntry> entries;
  bool passed() const;
};

// Central finite differences against the analytic gradient of every loss on
// random 2×3×8×8 inputs (pce/CE/Dice/pseudo through the softmax).
GradcheckReport gradcheck_suite(uint64_t seed = 0, int trials = 20, double tolerance = 1e-4);

// Reads a run directory and writes report.md with loss_curve.svg,
// selection.svg and reliable_fraction.svg. Throws IoError on a missing
// loss.csv. Returns the markdown path.
std::filesystem::path emit_report(const std::filesystem::path& run_dir);

// Teacher-selection fractions per bin of `bin` consecutive selection records.
struct SelectionBin {
  int64_t first_iteration = 0;
  double t1 = 0.0;
  double t2 = 0.0;
};
std::vector<SelectionBin> selection_fractions(const std::vector<SelectionRecord>& log, int64_t bin);

}  // namespace sdtlab
