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

#include "sdtlab/losses.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace sdtlab {

namespace {

struct Dims {
  int64_t n, k, hw;
};

Dims prob_dims(const TensorD& probs, const LabelMap& labels, const char* what) {
  if (probs.rank() != 4) {
    throw InputError(std::string(what) + ": probabilities must be N×K×H×W, got " +
                     shape_to_string(probs.shape()));
  }
  const Shape expected{probs.dim(0), probs.dim(2), probs.dim(3)};
  require_same_shape(labels.shape(), expected, what);
  return {probs.dim(0), probs.dim(1), probs.dim(2) * probs.dim(3)};
}

TensorD& sink_tensor(const GradSink& sink, const Shape& shape) {
  if (sink.grad->empty()) *sink.grad = TensorD(shape, 0.0);
  require_same_shape(sink.grad->shape(), shape, "gradient sink");
  return *sink.grad;
}

void check_label(uint8_t label, int64_t k, const char* what) {
  if (label >= k) {
    throw InputError(std::string(what) + ": label " + std::to_string(label) +
                     " out of range for " + std::to_string(k) + " classes");
  }
}

// Shared cross-entropy over a pixel subset given by `take(n, i)`.
template <typename Take>
double cross_entropy(const TensorD& probs, const LabelMap& labels, const Dims& d, Take take,
                     GradSink sink, bool unnormalized, const char* what) {
  double sum = 0.0;
  int64_t count = 0;
  for (int64_t n = 0; n < d.n; ++n) {
    for (int64_t i = 0; i < d.hw; ++i) {
      if (!take(n, i)) continue;
      const uint8_t c = labels[n * d.hw + i];
      check_label(c, d.k, what);
      const double p = probs[(n * d.k + c) * d.hw + i];
      sum += -std::log(std::clamp(p, kProbEps, 1.0));
      ++count;
    }
  }
  if (count == 0) return 0.0;
  const double norm = unnormalized ? 1.0 : static_cast<double>(count);
  if (sink.grad) {
    TensorD& g = sink_tensor(sink, probs.shape());
    for (int64_t n = 0; n < d.n; ++n) {
      for (int64_t i = 0; i < d.hw; ++i) {
        if (!take(n, i)) continue;
        const uint8_t c = labels[n * d.hw + i];
        const int64_t idx = (n * d.k + c) * d.hw + i;
        const double p = probs[idx];
        // The clamp is flat below kProbEps and at p > 1.
        if (p >= kProbEps && p <= 1.0) g[idx] += sink.scale * (-1.0 / (p * norm));
      }
    }
  }
  return sum / norm;
}

}  // namespace

double PseudoLabelMap::reliable_fraction() const {
  if (reliable.empty()) return 0.0;
  const auto kept = std::count_if(reliable.values().begin(), reliable.values().end(),
                                  [](uint8_t v) { return v != 0; });
  return static_cast<double>(kept) / static_cast<double>(reliable.size());
}

LabelMap PseudoLabelMap::as_label_map() const {
  LabelMap out = labels;
  for (int64_t i = 0; i < out.size(); ++i) {
    if (!reliable[i]) out[i] = kIgnore;
  }
  return out;
}

TensorD softmax(const TensorD& logits) {
  if (logits.rank() != 4) throw InputError("softmax: expected N×K×H×W logits");
  const int64_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  TensorD out(logits.shape());
  for (int64_t b = 0; b < n; ++b) {
    const double* src = logits.data() + b * k * hw;
    double* dst = out.data() + b * k * hw;
    for (int64_t i = 0; i < hw; ++i) {
      double m = src[i];
      for (int64_t c = 1; c < k; ++c) m = std::max(m, src[c * hw + i]);
      double z = 0.0;
      for (int64_t c = 0; c < k; ++c) {
        const double e = std::exp(src[c * hw + i] - m);
        dst[c * hw + i] = e;
        z += e;
      }
      for (int64_t c = 0; c < k; ++c) dst[c * hw + i] /= z;
    }
  }
  return out;
}

TensorD softmax_backward(const TensorD& probs, const TensorD& d_probs) {
  require_same_shape(probs.shape(), d_probs.shape(), "softmax_backward");
  const int64_t n = probs.dim(0), k = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  TensorD out(probs.shape());
  for (int64_t b = 0; b < n; ++b) {
    const int64_t base = b * k * hw;
    for (int64_t i = 0; i < hw; ++i) {
      double dot = 0.0;
      for (int64_t c = 0; c < k; ++c) dot += probs[base + c * hw + i] * d_probs[base + c * hw + i];
      for (int64_t c = 0; c < k; ++c) {
        const int64_t idx = base + c * hw + i;
        out[idx] = probs[idx] * (d_probs[idx] - dot);
      }
    }
  }
  return out;
}

double pce_loss(const TensorD& probs, const LabelMap& labels, GradSink sink, PceOptions options) {
  const Dims d = prob_dims(probs, labels, "pce_loss");
  return cross_entropy(
      probs, labels, d, [&](int64_t n, int64_t i) { return labels[n * d.hw + i] != kIgnore; }, sink,
      options.unnormalized, "pce_loss");
}

double masked_ce_loss(const TensorD& probs, const LabelMap& labels, const Tensor<uint8_t>& mask,
                      GradSink sink) {
  const Dims d = prob_dims(probs, labels, "masked_ce_loss");
  require_same_shape(mask.shape(), labels.shape(), "masked_ce_loss: mask");
  return cross_entropy(
      probs, labels, d, [&](int64_t n, int64_t i) { return mask[n * d.hw + i] != 0; }, sink, false,
      "masked_ce_loss");
}

double masked_dice_loss(const TensorD& probs, const LabelMap& labels,
                        const Tensor<uint8_t>& reliable, GradSink sink) {
  const Dims d = prob_dims(probs, labels, "masked_dice_loss");
  require_same_shape(reliable.shape(), labels.shape(), "masked_dice_loss: mask");

  std::vector<double> inter(static_cast<size_t>(d.k), 0.0), psum(inter), gsum(inter);
  int64_t count = 0;
  for (int64_t n = 0; n < d.n; ++n) {
    for (int64_t i = 0; i < d.hw; ++i) {
      if (!reliable[n * d.hw + i]) continue;
      const uint8_t label = labels[n * d.hw + i];
      check_label(label, d.k, "masked_dice_loss");
      ++count;
      for (int64_t c = 0; c < d.k; ++c) {
        const double p = probs[(n * d.k + c) * d.hw + i];
        psum[static_cast<size_t>(c)] += p;
        if (c == label) {
          inter[static_cast<size_t>(c)] += p;
          gsum[static_cast<size_t>(c)] += 1.0;
        }
      }
    }
  }
  if (count == 0) return 0.0;

  std::vector<int64_t> classes;
  for (int64_t c = 0; c < d.k; ++c) {
    if (gsum[static_cast<size_t>(c)] > 0.0 || psum[static_cast<size_t>(c)] > 0.0) classes.push_back(c);
  }
  if (classes.empty()) return 0.0;

  double mean_dice = 0.0;
  for (int64_t c : classes) {
    const auto ci = static_cast<size_t>(c);
    mean_dice += (2.0 * inter[ci] + kDiceEps) / (psum[ci] + gsum[ci] + kDiceEps);
  }
  const double inv_classes = 1.0 / static_cast<double>(classes.size());
  mean_dice *= inv_classes;

  if (sink.grad) {
    TensorD& g = sink_tensor(sink, probs.shape());
    // dD_c/dp_i = (2 g_i S − (2I + ε)) / S² with S = Σp + Σg + ε.
    for (int64_t c : classes) {
      const auto ci = static_cast<size_t>(c);
      const double s = psum[ci] + gsum[ci] + kDiceEps;
      const double num = 2.0 * inter[ci] + kDiceEps;
      for (int64_t n = 0; n < d.n; ++n) {
        for (int64_t i = 0; i < d.hw; ++i) {
          if (!reliable[n * d.hw + i]) continue;
          const double gi = labels[n * d.hw + i] == c ? 1.0 : 0.0;
          const double dd = (2.0 * gi * s - num) / (s * s);
          g[(n * d.k + c) * d.hw + i] += sink.scale * (-inv_classes * dd);
        }
      }
    }
  }
  return 1.0 - mean_dice;
}

double pseudo_loss(const TensorD& student_probs, const PseudoLabelMap& pl, GradSink sink) {
  GradSink half{sink.grad, sink.scale * 0.5};
  const double ce = masked_ce_loss(student_probs, pl.labels, pl.reliable, half);
  const double dice = masked_dice_loss(student_probs, pl.labels, pl.reliable, half);
  return 0.5 * (ce + dice);
}

double feature_consistency(const TensorD& f_s, const TensorD& f_t, GradSink sink) {
  require_same_shape(f_s.shape(), f_t.shape(), "feature_consistency");
  if (f_s.rank() < 1 || f_s.empty()) throw InputError("feature_consistency: empty features");
  const int64_t batch = f_s.dim(0);
  const int64_t per = f_s.size() / batch;
  const double total = static_cast<double>(f_s.size());

  double l1 = 0.0;
  for (int64_t i = 0; i < f_s.size(); ++i) l1 += std::abs(f_s[i] - f_t[i]);
  l1 /= total;

  std::vector<double> cosines(static_cast<size_t>(batch), 0.0), ns(cosines), nt(cosines);
  double cos_term = 0.0;
  for (int64_t b = 0; b < batch; ++b) {
    double dot = 0.0, ss = 0.0, tt = 0.0;
    for (int64_t i = b * per; i < (b + 1) * per; ++i) {
      dot += f_s[i] * f_t[i];
      ss += f_s[i] * f_s[i];
      tt += f_t[i] * f_t[i];
    }
    const auto bi = static_cast<size_t>(b);
    ns[bi] = std::sqrt(ss);
    nt[bi] = std::sqrt(tt);
    // sqrt(ss·tt) rather than ns·nt: exact for identical inputs, so the
    // loss is exactly 0 there and never dips below it.
    cosines[bi] = (ns[bi] > 0.0 && nt[bi] > 0.0)
                      ? std::clamp(dot / std::sqrt(ss * tt), -1.0, 1.0)
                      : 0.0;
    cos_term += 1.0 - cosines[bi];
  }
  cos_term /= static_cast<double>(batch);

  if (sink.grad) {
    TensorD& g = sink_tensor(sink, f_s.shape());
    const double l1_scale = sink.scale * 0.5 / total;
    const double cos_scale = sink.scale * 0.5 / static_cast<double>(batch);
    for (int64_t b = 0; b < batch; ++b) {
      const auto bi = static_cast<size_t>(b);
      const bool defined = ns[bi] > 0.0 && nt[bi] > 0.0;
      for (int64_t i = b * per; i < (b + 1) * per; ++i) {
        const double diff = f_s[i] - f_t[i];
        // Subgradient 0 at diff == 0.
        const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        double gi = l1_scale * sign;
        if (defined) {
          const double dcos = f_t[i] / (ns[bi] * nt[bi]) - cosines[bi] * f_s[i] / (ns[bi] * ns[bi]);
          gi -= cos_scale * dcos;
        }
        g[i] += gi;
      }
    }
  }
  return 0.5 * (l1 + cos_term);
}

double hico_loss(const FeatureTaps& student, const FeatureTaps& teacher, GradSink low,
                 GradSink high) {
  const double l = feature_consistency(student.low, teacher.low, {low.grad, low.scale * 0.5});
  const double h = feature_consistency(student.high, teacher.high, {high.grad, high.scale * 0.5});
  return 0.5 * (l + h);
}

LossBreakdown total_loss(double scribble, double pseudo, double hico) {
  const std::pair<const char*, double> parts[] = {
      {"scribble", scribble}, {"pseudo", pseudo}, {"hico", hico}};
  for (const auto& [name, value] : parts) {
    if (!std::isfinite(value)) {
      throw NumericalError(std::string("non-finite loss component '") + name +
                           "': " + std::to_string(value));
    }
  }
  LossBreakdown b;
  b.scribble = scribble;
  b.pseudo = pseudo;
  b.hico = hico;
  b.total = (scribble + pseudo) + hico;
  return b;
}

}  // namespace sdtlab
