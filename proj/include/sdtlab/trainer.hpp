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
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdtlab/backbone.hpp"
#include "sdtlab/dts.hpp"
#include "sdtlab/losses.hpp"
#include "sdtlab/phantom.hpp"

namespace sdtlab {

enum class TeacherMode { kSingle, kDual };
// How the pseudo-label source is chosen after warm-up. kNone is the only
// policy valid for a single teacher.
enum class PseudoPolicy { kNone, kAvg, kDts };
enum class TeacherInit { kIndependent, kStudent };
enum class WarmupEma { kBoth, kNone };

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int64_t total_iters = 30000;
  int64_t warmup_iters = 12000;
  int batch_size = 8;
  double tau = 0.5;
  double alpha = 0.999;
  uint64_t seed = 0;

  TeacherMode teachers = TeacherMode::kDual;
  PseudoPolicy policy = PseudoPolicy::kDts;
  bool prp = true;
  bool hico = true;

  bool per_sample = false;
  bool pce_unnormalized = false;
  bool poly_decay = false;
  TeacherInit teacher_init = TeacherInit::kIndependent;
  WarmupEma warmup_ema = WarmupEma::kBoth;
  // Mean-teacher style ramp: the decay at step t is min(alpha, 1 - 1/(t+1)).
  bool ema_ramp = false;

  bool augment = true;
  double rotation_prob = 0.0;  // chance of an extra continuous rotation

  std::vector<int> widths{16, 32, 64, 128, 256};
  int norm_groups = 4;
  ComputePrecision precision = ComputePrecision::kFloat32;

  int64_t val_every = 0;         // 0 disables periodic validation
  int64_t checkpoint_every = 0;  // 0 writes the resumable state only at the end
  int64_t log_every = 0;         // progress lines on stderr; 0 is silent

  // Throws ConfigError. num_classes bounds tau from below when positive.
  void validate(int num_classes = 0) const;
};

// Flat "key = value" text; '#' starts a comment. Unknown keys are rejected.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);
std::string format_train_config(const TrainConfig& config);
nlohmann::json train_config_to_json(const TrainConfig& config);

const char* policy_name(PseudoPolicy p);
const char* teacher_mode_name(TeacherMode m);

struct LossRecord {
  int64_t iteration = 0;
  LossBreakdown loss;
};

struct TrainState {
  int64_t iteration = 0;
  NetworkWeights student;
  TeacherEnsemble teachers;
  NetworkWeights velocity;
  // Rows not yet written to loss.csv. run() flushes these and the selection
  // log periodically so memory does not grow with the schedule length.
  std::vector<LossRecord> history;
  double best_val = -1.0;
  int64_t best_iteration = -1;
};

// Student and teachers built from the seed; zero momentum.
TrainState init_train_state(const TrainConfig& config, int num_classes);

struct Batch {
  TensorF images;    // N×1×H×W
  LabelMap scribble;  // N×H×W
};

// The batch consumed at `iteration`: epoch-wise shuffled sample order and
// per-sample augmentation, both derived from (seed, iteration) only.
Batch make_batch(const std::vector<PhantomSample>& train, const TrainConfig& config,
                 int64_t iteration);

// v ← momentum·v + (g + weight_decay·θ); θ ← θ − lr·v
void sgd_update(NetworkWeights& weights, const NetworkWeights& grads, NetworkWeights& velocity,
                double lr, double momentum, double weight_decay);

double learning_rate_at(const TrainConfig& config, int64_t iteration);

// One optimization step on `batch` at state.iteration; advances the iteration
// and appends the breakdown to state.history. A non-finite loss throws
// NumericalError carrying every component.
LossBreakdown train_step(TrainState& state, const Batch& batch, const TrainConfig& config);

void save_train_state(const std::filesystem::path& path, const TrainState& state,
                      const TrainConfig& config);
TrainState load_train_state(const std::filesystem::path& path);

struct RunOptions {
  // Resumable state to continue from (usually <out>/state.ckpt).
  std::optional<std::filesystem::path> resume;
  // Stop after this iteration instead of total_iters (still saves state).
  std::optional<int64_t> stop_at;
};

struct RunSummary {
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
  double best_val = -1.0;
  int64_t best_iteration = -1;
  int64_t iterations = 0;
  double seconds = 0.0;
};

// Trains on the train split, validating on val every val_every steps when the
// split is non-empty. Writes loss.csv, selection.csv, last.ckpt, best.ckpt,
// state.ckpt and train_meta.json into out_dir.
RunSummary run(const TrainConfig& config, const Dataset& dataset,
               const std::filesystem::path& out_dir, const RunOptions& options = {});
RunSummary run(const TrainConfig& config, const std::filesystem::path& dataset_dir,
               const std::filesystem::path& out_dir, const RunOptions& options = {});

}  // namespace sdtlab
