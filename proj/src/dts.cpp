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

#include "sdtlab/dts.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace sdtlab {

std::pair<double, double> score_teachers(const TensorD& probs_t1, const TensorD& probs_t2,
                                         const LabelMap& scribble, PceOptions options) {
  require_same_shape(probs_t1.shape(), probs_t2.shape(), "score_teachers");
  return {pce_loss(probs_t1, scribble, {}, options), pce_loss(probs_t2, scribble, {}, options)};
}

Teacher select_teacher(double loss_t1, double loss_t2) {
  if (std::isnan(loss_t1) || std::isnan(loss_t2)) {
    throw NumericalError("select_teacher: NaN teacher score");
  }
  return loss_t1 < loss_t2 ? Teacher::kT1 : Teacher::kT2;
}

PseudoLabelMap pick_reliable_pixels(const TensorD& probs, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) {
    throw ConfigError("pick_reliable_pixels: threshold must lie in [0, 1], got " +
                      std::to_string(tau));
  }
  if (probs.rank() != 4) throw InputError("pick_reliable_pixels: expected N×K×H×W probabilities");
  const int64_t n = probs.dim(0), k = probs.dim(1), h = probs.dim(2), w = probs.dim(3);
  const int64_t hw = h * w;
  PseudoLabelMap pl;
  pl.threshold = tau;
  pl.labels = LabelMap({n, h, w}, 0);
  pl.reliable = Tensor<uint8_t>({n, h, w}, 0);
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t i = 0; i < hw; ++i) {
      int64_t best = 0;
      double pmax = probs[(b * k) * hw + i];
      for (int64_t c = 1; c < k; ++c) {
        const double p = probs[(b * k + c) * hw + i];
        if (p > pmax) {
          pmax = p;
          best = c;
        }
      }
      pl.labels[b * hw + i] = static_cast<uint8_t>(best);
      pl.reliable[b * hw + i] = pmax >= tau ? 1 : 0;
    }
  }
  return pl;
}

void ema_update(NetworkWeights& teacher, const NetworkWeights& student, double alpha) {
  if (teacher.fingerprint() != student.fingerprint()) {
    throw InputError("ema_update: teacher and student architectures differ");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("ema_update: decay must lie in [0, 1]");
  }
  const double beta = 1.0 - alpha;
  auto& tp = teacher.params();
  const auto& sp = student.params();
  for (size_t j = 0; j < tp.size(); ++j) {
    auto& tv = tp[j].values;
    const auto& sv = sp[j].values;
    for (size_t i = 0; i < tv.size(); ++i) tv[i] = alpha * tv[i] + beta * sv[i];
  }
}

namespace {

// Copies sample `b` of a 4D tensor into the same slot of `dst`.
void copy_sample(const TensorD& src, TensorD& dst, int64_t b) {
  const int64_t per = src.size() / src.dim(0);
  std::copy(src.data() + b * per, src.data() + (b + 1) * per, dst.data() + b * per);
}

}  // namespace

DtsResult dts_step(TeacherEnsemble& ensemble, const ModelOutput& student,
                   const ModelOutput& teacher1, const ModelOutput& teacher2,
                   const LabelMap& scribble, int64_t iteration, const DtsOptions& options) {
  require_same_shape(teacher1.logits.shape(), student.logits.shape(), "dts_step: teacher 1");
  require_same_shape(teacher2.logits.shape(), student.logits.shape(), "dts_step: teacher 2");

  const TensorD p1 = softmax(teacher1.logits);
  const TensorD p2 = softmax(teacher2.logits);
  const auto [l1, l2] = score_teachers(p1, p2, scribble, options.pce);
  const Teacher chosen = select_teacher(l1, l2);

  DtsResult result;
  result.record = {iteration, chosen, l1, l2};
  if (!options.per_sample) {
    result.teacher_probs = chosen == Teacher::kT1 ? p1 : p2;
    result.taps = chosen == Teacher::kT1 ? teacher1.taps : teacher2.taps;
  } else {
    result.teacher_probs = TensorD(p1.shape());
    result.taps = {TensorD(teacher1.taps.low.shape()), TensorD(teacher1.taps.high.shape())};
    const int64_t batch = p1.dim(0);
    const int64_t hw = scribble.dim(1) * scribble.dim(2);
    for (int64_t b = 0; b < batch; ++b) {
      // Per-sample scores on a one-sample view.
      const int64_t k = p1.dim(1);
      TensorD s1({1, k, p1.dim(2), p1.dim(3)}), s2(s1.shape());
      std::copy(p1.data() + b * k * hw, p1.data() + (b + 1) * k * hw, s1.data());
      std::copy(p2.data() + b * k * hw, p2.data() + (b + 1) * k * hw, s2.data());
      LabelMap sc({1, scribble.dim(1), scribble.dim(2)});
      std::copy(scribble.data() + b * hw, scribble.data() + (b + 1) * hw, sc.data());
      const auto [sl1, sl2] = score_teachers(s1, s2, sc, options.pce);
      const bool first = select_teacher(sl1, sl2) == Teacher::kT1;
      copy_sample(first ? p1 : p2, result.teacher_probs, b);
      copy_sample(first ? teacher1.taps.low : teacher2.taps.low, result.taps.low, b);
      copy_sample(first ? teacher1.taps.high : teacher2.taps.high, result.taps.high, b);
    }
  }
  result.pseudo = pick_reliable_pixels(result.teacher_probs, options.tau);
  ensemble.selection_log.push_back(result.record);
  return result;
}

void write_selection_csv(const std::filesystem::path& path,
                         const std::vector<SelectionRecord>& log) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << "iteration,selected,L_T1,L_T2\n";
  char buf[128];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf), "%lld,%s,%.17g,%.17g\n", static_cast<long long>(r.iteration),
                  teacher_name(r.selected), r.loss_t1, r.loss_t2);
    f << buf;
  }
}

}  // namespace sdtlab
