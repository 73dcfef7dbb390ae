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

#include "sdtlab/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "sdtlab/checkpoint.hpp"
#include "sdtlab/error.hpp"
#include "sdtlab/losses.hpp"

namespace sdtlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string class_name(int c, int num_classes) {
  if (num_classes == 4) {
    switch (c) {
      case kRightVentricle: return "RV";
      case kMyocardium: return "MYO";
      case kLeftVentricle: return "LV";
      default: break;
    }
  }
  return "class" + std::to_string(c);
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

// --- Dice -----------------------------------------------------------------

DiceReport dice_score(const LabelMap& pred, const LabelMap& truth, int num_classes) {
  require_same_shape(pred.shape(), truth.shape(), "dice_score");
  if (num_classes < 2) throw InputError("dice_score: need at least two classes");
  std::vector<int64_t> p(static_cast<size_t>(num_classes), 0), t(p), both(p);
  for (int64_t i = 0; i < pred.size(); ++i) {
    const int a = pred[i], b = truth[i];
    if (a < num_classes) ++p[static_cast<size_t>(a)];
    if (b < num_classes) ++t[static_cast<size_t>(b)];
    if (a == b && a < num_classes) ++both[static_cast<size_t>(a)];
  }
  DiceReport r;
  r.samples = 1;
  double sum = 0.0;
  for (int c = 1; c < num_classes; ++c) {
    const auto pc = p[static_cast<size_t>(c)], tc = t[static_cast<size_t>(c)];
    if (pc + tc == 0) continue;
    const double d = 2.0 * static_cast<double>(both[static_cast<size_t>(c)]) / static_cast<double>(pc + tc);
    r.per_class[c] = d;
    sum += d;
  }
  r.mean = r.per_class.empty() ? 0.0 : sum / static_cast<double>(r.per_class.size());
  return r;
}

DiceReport aggregate_dice(const std::vector<DiceReport>& per_sample, int num_classes) {
  DiceReport r;
  for (int c = 1; c < num_classes; ++c) {
    double sum = 0.0;
    int64_t n = 0;
    for (const auto& s : per_sample) {
      if (auto it = s.per_class.find(c); it != s.per_class.end()) {
        sum += it->second;
        ++n;
      }
    }
    if (n > 0) r.per_class[c] = sum / static_cast<double>(n);
  }
  for (const auto& s : per_sample) r.samples += s.samples;
  double sum = 0.0;
  for (const auto& [c, d] : r.per_class) sum += d;
  r.mean = r.per_class.empty() ? 0.0 : sum / static_cast<double>(r.per_class.size());
  return r;
}

LabelMap evaluate_volume(const NetworkWeights& weights, const TensorF& volume) {
  if (volume.rank() != 3) throw InputError("evaluate_volume: expected a D×H×W volume");
  const int64_t d = volume.dim(0), h = volume.dim(1), w = volume.dim(2);
  const int64_t hw = h * w;
  const int k = weights.config().num_classes;
  LabelMap pred({d, h, w}, 0);
  for (int64_t z = 0; z < d; ++z) {
    TensorF slice({1, 1, h, w});
    std::copy(volume.data() + z * hw, volume.data() + (z + 1) * hw, slice.data());
    const ModelOutput out = forward(weights, slice);
    // Argmax of the logits equals argmax of the softmax.
    for (int64_t i = 0; i < hw; ++i) {
      int best = 0;
      double v = out.logits[i];
      for (int c = 1; c < k; ++c) {
        const double x = out.logits[c * hw + i];
        if (x > v) {
          v = x;
          best = c;
        }
      }
      pred[z * hw + i] = static_cast<uint8_t>(best);
    }
  }
  return pred;
}

DiceReport evaluate_samples(const NetworkWeights& weights, const std::vector<PhantomSample>& samples) {
  const int k = weights.config().num_classes;
  std::vector<DiceReport> reports;
  reports.reserve(samples.size());
  for (const auto& s : samples) {
    TensorF vol({1, s.height(), s.width()});
    std::copy(s.image.data(), s.image.data() + s.image.size(), vol.data());
    LabelMap pred = evaluate_volume(weights, vol);
    LabelMap truth({1, s.height(), s.width()});
    std::copy(s.mask.data(), s.mask.data() + s.mask.size(), truth.data());
    reports.push_back(dice_score(pred, truth, k));
  }
  return aggregate_dice(reports, k);
}

json dice_to_json(const DiceReport& report) {
  json per = json::object();
  int k = 4;
  if (!report.per_class.empty()) k = std::max(k, report.per_class.rbegin()->first + 1);
  for (const auto& [c, d] : report.per_class) per[class_name(c, k)] = d;
  return {{"per_class", per}, {"mean", report.mean}, {"samples", report.samples}};
}

// --- Avg baseline policy ----------------------------------------------------

AvgPolicyResult avg_policy(const ModelOutput& teacher1, const ModelOutput& teacher2, double tau) {
  require_same_shape(teacher1.logits.shape(), teacher2.logits.shape(), "avg_policy");
  AvgPolicyResult r;
  const TensorD p1 = softmax(teacher1.logits), p2 = softmax(teacher2.logits);
  r.probs = TensorD(p1.shape());
  for (int64_t i = 0; i < p1.size(); ++i) r.probs[i] = 0.5 * (p1[i] + p2[i]);
  auto mean = [](const TensorD& a, const TensorD& b) {
    require_same_shape(a.shape(), b.shape(), "avg_policy: taps");
    TensorD m(a.shape());
    for (int64_t i = 0; i < a.size(); ++i) m[i] = 0.5 * (a[i] + b[i]);
    return m;
  };
  r.taps.low = mean(teacher1.taps.low, teacher2.taps.low);
  r.taps.high = mean(teacher1.taps.high, teacher2.taps.high);
  r.pseudo = pick_reliable_pixels(r.probs, tau);
  return r;
}

// --- Ablation ---------------------------------------------------------------

std::vector<AblationRow> ablation_rows() {
  using M = TeacherMode;
  using P = PseudoPolicy;
  std::vector<AblationRow> rows;
  auto add = [&rows](M m, P p, bool prp, bool hico) {
    AblationRow r;
    r.teachers = m;
    r.policy = p;
    r.prp = prp;
    r.hico = hico;
    rows.push_back(r);
  };
  add(M::kSingle, P::kNone, false, false);
  add(M::kSingle, P::kNone, true, true);
  add(M::kDual, P::kAvg, true, true);
  add(M::kDual, P::kDts, false, false);
  add(M::kDual, P::kDts, true, false);
  add(M::kDual, P::kDts, false, true);
  add(M::kDual, P::kDts, true, true);
  return rows;
}

uint64_t fairness_hash(const TrainConfig& config, const Dataset& dataset) {
  TrainConfig shared = config;
  shared.teachers = TeacherMode::kDual;
  shared.policy = PseudoPolicy::kDts;
  shared.prp = true;
  shared.hico = true;
  const std::string text = format_train_config(shared);
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) h = (h ^ ch) * 1099511628211ULL;
  return mix64(h ^ dataset_fingerprint(dataset));
}

namespace {

const char* pl_label(const AblationRow& r) {
  if (r.teachers == TeacherMode::kSingle) return "Teacher";
  return r.policy == PseudoPolicy::kAvg ? "Avg" : "DTS";
}

}  // namespace

std::string render_ablation_markdown(const AblationGrid& grid) {
  int k = 4;
  for (const auto& r : grid.rows) {
    if (!r.dice.per_class.empty()) k = std::max(k, r.dice.per_class.rbegin()->first + 1);
  }
  // Table order lists LV, MYO, RV for the cardiac labels.
  std::vector<int> cols;
  for (int c = k - 1; c >= 1; --c) cols.push_back(c);
  std::ostringstream md;
  md << "| No. T | PL | PRP | HiCo |";
  for (int c : cols) md << ' ' << class_name(c, k) << " |";
  md << " Avg |\n|---|---|---|---|";
  for (size_t i = 0; i < cols.size(); ++i) md << "---|";
  md << "---|\n";
  char buf[32];
  for (const auto& r : grid.rows) {
    md << "| " << (r.teachers == TeacherMode::kSingle ? "Single" : "Dual") << " | " << pl_label(r)
       << " | " << (r.prp ? "✓" : "✗") << " | " << (r.hico ? "✓" : "✗") << " |";
    for (int c : cols) {
      auto it = r.dice.per_class.find(c);
      if (it == r.dice.per_class.end()) {
        md << " - |";
      } else {
        std::snprintf(buf, sizeof(buf), " %.1f |", 100.0 * it->second);
        md << buf;
      }
    }
    std::snprintf(buf, sizeof(buf), " %.1f |\n", 100.0 * r.dice.mean);
    md << buf;
  }
  md << "\nFairness hash: `" << hex64(grid.fairness) << "` (identical across rows: "
     << (grid.fair ? "yes" : "NO") << ")\n";
  return md.str();
}

AblationGrid run_ablation(const TrainConfig& base, const Dataset& dataset, const fs::path& out_dir) {
  const auto& eval_split = dataset.test.empty() ? dataset.val : dataset.test;
  if (eval_split.empty()) throw InputError("run_ablation: need a test or validation split");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string());

  AblationGrid grid;
  grid.rows = ablation_rows();
  grid.fair = true;
  for (size_t i = 0; i < grid.rows.size(); ++i) {
    AblationRow& row = grid.rows[i];
    TrainConfig cfg = base;
    cfg.teachers = row.teachers;
    cfg.policy = row.policy;
    cfg.prp = row.prp;
    cfg.hico = row.hico;
    cfg.per_sample = base.per_sample && row.policy == PseudoPolicy::kDts;
    row.fairness = fairness_hash(cfg, dataset);
    const RunSummary s = run(cfg, dataset, out_dir / ("row" + std::to_string(i + 1)));
    row.dice = evaluate_samples(load_weights(s.last_checkpoint), eval_split);
    if (i == 0) grid.fairness = row.fairness;
    grid.fair = grid.fair && row.fairness == grid.fairness;
  }

  std::ofstream csv(out_dir / "ablation.csv", std::ios::trunc);
  if (!csv) throw IoError("cannot write ablation.csv");
  const int k = dataset.spec.num_classes;
  csv << "row,teachers,pl,prp,hico";
  for (int c = k - 1; c >= 1; --c) csv << ',' << class_name(c, k);
  csv << ",avg,fairness\n";
  char buf[40];
  for (size_t i = 0; i < grid.rows.size(); ++i) {
    const auto& r = grid.rows[i];
    csv << i + 1 << ',' << teacher_mode_name(r.teachers) << ',' << pl_label(r) << ','
        << (r.prp ? "on" : "off") << ',' << (r.hico ? "on" : "off");
    for (int c = k - 1; c >= 1; --c) {
      auto it = r.dice.per_class.find(c);
      if (it == r.dice.per_class.end()) {
        csv << ',';
      } else {
        std::snprintf(buf, sizeof(buf), ",%.17g", it->second);
        csv << buf;
      }
    }
    std::snprintf(buf, sizeof(buf), ",%.17g,", r.dice.mean);
    csv << buf << hex64(r.fairness) << '\n';
  }
  std::ofstream md(out_dir / "ablation.md", std::ios::trunc);
  if (!md) throw IoError("cannot write ablation.md");
  md << render_ablation_markdown(grid);
  return grid;
}

AblationGrid run_ablation(const TrainConfig& base, const fs::path& dataset_dir, const fs::path& out_dir) {
  return run_ablation(base, load_dataset(dataset_dir), out_dir);
}

// --- Gradient check ------------------------------------------------------------

bool GradcheckReport::passed() const {
  return !entries.empty() &&
         std::all_of(entries.begin(), entries.end(), [](const GradcheckEntry& e) { return e.passed; });
}

namespace {

// Gradients smaller than this are compared absolutely.
constexpr double kGradFloor = 1e-6;

TensorD random_tensor(const Shape& shape, Rng& rng, double scale) {
  std::normal_distribution<double> nd(0.0, scale);
  TensorD t(shape);
  for (auto& v : t.span()) v = nd(rng);
  return t;
}

LabelMap random_labels(int64_t n, int64_t h, int64_t w, int k, double ignore_prob, Rng& rng) {
  std::uniform_int_distribution<int> cls(0, k - 1);
  std::bernoulli_distribution ign(ignore_prob);
  LabelMap l({n, h, w});
  for (auto& v : l.span()) {
    const int c = cls(rng);
    v = ign(rng) ? kIgnore : static_cast<uint8_t>(c);
  }
  return l;
}

Tensor<uint8_t> random_mask(int64_t n, int64_t h, int64_t w, double keep, Rng& rng) {
  std::bernoulli_distribution b(keep);
  Tensor<uint8_t> m({n, h, w});
  for (auto& v : m.span()) v = b(rng) ? 1 : 0;
  return m;
}

// Loss of an input tensor; when `grad` is non-null also writes dL/dinput.
using LossFn = std::function<double(const TensorD&, TensorD*)>;

// Compares the analytic gradient against central differences. `skip` marks
// coordinates excluded from the comparison.
void check_one(const LossFn& fn, TensorD x, double step, GradcheckEntry& e,
               const std::function<bool(int64_t)>& skip = {}) {
  TensorD g;
  fn(x, &g);
  for (int64_t i = 0; i < x.size(); ++i) {
    if (skip && skip(i)) {
      ++e.skipped;
      continue;
    }
    const double orig = x[i];
    x[i] = orig + step;
    const double up = fn(x, nullptr);
    x[i] = orig - step;
    const double down = fn(x, nullptr);
    x[i] = orig;
    const double num = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(num), std::abs(g[i]), kGradFloor});
    e.max_rel_error = std::max(e.max_rel_error, std::abs(num - g[i]) / denom);
    ++e.checked;
  }
}

// Wraps a loss on probabilities into a loss on logits.
LossFn through_softmax(std::function<double(const TensorD&, GradSink)> loss) {
  return [loss](const TensorD& logits, TensorD* grad) {
    const TensorD p = softmax(logits);
    if (!grad) return loss(p, {});
    TensorD dp;
    const double v = loss(p, {&dp, 1.0});
    *grad = dp.empty() ? TensorD(logits.shape(), 0.0) : softmax_backward(p, dp);
    return v;
  };
}

}  // namespace

GradcheckReport gradcheck_suite(uint64_t seed, int trials, double tolerance) {
  GradcheckReport report;
  report.tolerance = tolerance;
  const double h = report.step;
  const Shape shape{2, 3, 8, 8};
  const int k = 3;
  const std::vector<std::string> names = {"pce_loss",           "masked_ce_loss",
                                          "masked_dice_loss",   "pseudo_loss",
                                          "feature_consistency", "hico_loss"};
  for (size_t li = 0; li < names.size(); ++li) {
    GradcheckEntry e;
    e.name = names[li];
    for (int t = 0; t < trials; ++t) {
      Rng rng(derive_seed(seed, Stream::kInit, li * 1000 + static_cast<uint64_t>(t)));
      const TensorD logits = random_tensor(shape, rng, 1.5);
      if (li <= 3) {
        const LabelMap labels = random_labels(2, 8, 8, k, li == 0 ? 0.5 : 0.0, rng);
        const Tensor<uint8_t> mask = random_mask(2, 8, 8, 0.6, rng);
        LossFn fn;
        switch (li) {
          case 0:
            fn = through_softmax([&](const TensorD& p, GradSink s) { return pce_loss(p, labels, s); });
            break;
          case 1:
            fn = through_softmax([&](const TensorD& p, GradSink s) { return masked_ce_loss(p, labels, mask, s); });
            break;
          case 2:
            fn = through_softmax([&](const TensorD& p, GradSink s) { return masked_dice_loss(p, labels, mask, s); });
            break;
          default: {
            PseudoLabelMap pl;
            pl.labels = labels;
            pl.reliable = mask;
            fn = through_softmax([pl](const TensorD& p, GradSink s) { return pseudo_loss(p, pl, s); });
          }
        }
        check_one(fn, logits, h, e);
      } else {
        // Teacher features are constants; only the student side is perturbed.
        const TensorD ft_low = random_tensor(shape, rng, 1.0);
        const TensorD ft_high = random_tensor(shape, rng, 1.0);
        const TensorD fs_high = random_tensor(shape, rng, 1.0);
        auto near_kink = [h](const TensorD& a, const TensorD& b) {
          return [&a, &b, h](int64_t i) { return std::abs(a[i] - b[i]) <= 10.0 * h; };
        };
        if (li == 4) {
          LossFn fn = [&](const TensorD& fs, TensorD* g) {
            if (!g) return feature_consistency(fs, ft_low);
            *g = TensorD();
            return feature_consistency(fs, ft_low, {g, 1.0});
          };
          check_one(fn, logits, h, e, near_kink(logits, ft_low));
        } else {
          // Perturb the low-level tap with the high-level one fixed, then the reverse.
          LossFn low = [&](const TensorD& fs, TensorD* g) {
            FeatureTaps s{fs, fs_high}, tt{ft_low, ft_high};
            if (!g) return hico_loss(s, tt);
            *g = TensorD();
            return hico_loss(s, tt, {g, 1.0}, {});
          };
          check_one(low, logits, h, e, near_kink(logits, ft_low));
          LossFn high = [&](const TensorD& fs, TensorD* g) {
            FeatureTaps s{logits, fs}, tt{ft_low, ft_high};
            if (!g) return hico_loss(s, tt);
            *g = TensorD();
            return hico_loss(s, tt, {}, {g, 1.0});
          };
          check_one(high, fs_high, h, e, near_kink(fs_high, ft_high));
        }
      }
      ++e.trials;
    }
    e.passed = e.max_rel_error < tolerance;
    report.entries.push_back(e);
  }
  return report;
}

// --- Report -------------------------------------------------------------------

std::vector<SelectionBin> selection_fractions(const std::vector<SelectionRecord>& log, int64_t bin) {
  if (bin <= 0) throw InputError("selection_fractions: bin must be positive");
  std::vector<SelectionBin> out;
  for (size_t i = 0; i < log.size(); i += static_cast<size_t>(bin)) {
    const size_t end = std::min(log.size(), i + static_cast<size_t>(bin));
    int64_t t1 = 0;
    for (size_t j = i; j < end; ++j) t1 += log[j].selected == Teacher::kT1 ? 1 : 0;
    SelectionBin b;
    b.first_iteration = log[i].iteration;
    b.t1 = static_cast<double>(t1) / static_cast<double>(end - i);
    b.t2 = 1.0 - b.t1;
    out.push_back(b);
  }
  return out;
}

namespace {

struct Series {
  std::string name;
  std::string color;
  std::vector<double> x, y;
};

// Averages consecutive points so a long curve stays within `max_points`.
Series downsample(Series s, size_t max_points) {
  if (s.x.size() <= max_points) return s;
  const size_t per = (s.x.size() + max_points - 1) / max_points;
  Series out{s.name, s.color, {}, {}};
  for (size_t i = 0; i < s.x.size(); i += per) {
    const size_t end = std::min(s.x.size(), i + per);
    double sx = 0, sy = 0;
    for (size_t j = i; j < end; ++j) {
      sx += s.x[j];
      sy += s.y[j];
    }
    out.x.push_back(sx / static_cast<double>(end - i));
    out.y.push_back(sy / static_cast<double>(end - i));
  }
  return out;
}

constexpr double kW = 640, kH = 360, kL = 60, kR = 20, kT = 30, kB = 40;

std::string svg_open(const std::string& title) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" "
                "font-family=\"sans-serif\" font-size=\"11\">\n"
                "<rect width=\"100%%\" height=\"100%%\" fill=\"white\"/>\n"
                "<text x=\"%.0f\" y=\"18\" font-size=\"13\">%s</text>\n",
                kW, kH, kL, title.c_str());
  return buf;
}

std::string axes(double x0, double x1, double y0, double y1, const std::string& xlabel) {
  char buf[1024];
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%.0f\" y1=\"%.0f\" x2=\"%.0f\" y2=\"%.0f\" stroke=\"black\"/>\n"
                "<line x1=\"%.0f\" y1=\"%.0f\" x2=\"%.0f\" y2=\"%.0f\" stroke=\"black\"/>\n"
                "<text x=\"%.0f\" y=\"%.0f\">%g</text><text x=\"%.0f\" y=\"%.0f\" text-anchor=\"end\">%g</text>\n"
                "<text x=\"%.0f\" y=\"%.0f\" text-anchor=\"end\">%.3g</text>"
                "<text x=\"%.0f\" y=\"%.0f\" text-anchor=\"end\">%.3g</text>\n"
                "<text x=\"%.0f\" y=\"%.0f\" text-anchor=\"middle\">%s</text>\n",
                kL, kH - kB, kW - kR, kH - kB, kL, kT, kL, kH - kB, kL, kH - kB + 14, x0, kW - kR,
                kH - kB + 14, x1, kL - 4, kH - kB, y0, kL - 4, kT + 8, y1, (kL + kW - kR) / 2,
                kH - 8, xlabel.c_str());
  return buf;
}

std::string line_chart(const std::string& title, const std::vector<Series>& series,
                       const std::string& xlabel) {
  double x0 = 1e300, x1 = -1e300, y0 = 0.0, y1 = -1e300;
  for (const auto& s : series) {
    for (size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (x0 > x1) x0 = 0, x1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  std::string svg = svg_open(title) + axes(x0, x1, y0, y1, xlabel);
  char buf[128];
  double legend_y = kT + 4;
  for (const auto& s : series) {
    svg += "<polyline fill=\"none\" stroke=\"" + s.color + "\" stroke-width=\"1.2\" points=\"";
    for (size_t i = 0; i < s.x.size(); ++i) {
      const double px = kL + (s.x[i] - x0) / (x1 - x0) * (kW - kL - kR);
      const double py = kH - kB - (s.y[i] - y0) / (y1 - y0) * (kH - kT - kB);
      std::snprintf(buf, sizeof(buf), "%.1f,%.1f ", px, py);
      svg += buf;
    }
    svg += "\"/>\n";
    std::snprintf(buf, sizeof(buf), "<text x=\"%.0f\" y=\"%.0f\" fill=\"", kW - kR - 120, legend_y + 10);
    svg += buf + s.color + "\">" + s.name + "</text>\n";
    legend_y += 14;
  }
  return svg + "</svg>\n";
}

std::string selection_chart(const std::vector<SelectionBin>& bins) {
  std::string svg = svg_open("Teacher selection frequency");
  const double x0 = bins.empty() ? 0.0 : static_cast<double>(bins.front().first_iteration);
  const double x1 = bins.empty() ? 1.0 : static_cast<double>(bins.back().first_iteration);
  svg += axes(x0, x1, 0.0, 1.0, "iteration (bin start)");
  const double width = (kW - kL - kR) / std::max<double>(1.0, static_cast<double>(bins.size()));
  const double plot_h = kH - kT - kB;
  char buf[256];
  for (size_t i = 0; i < bins.size(); ++i) {
    const double x = kL + static_cast<double>(i) * width;
    const double h1 = bins[i].t1 * plot_h;
    std::snprintf(buf, sizeof(buf),
                  "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"#1f77b4\"/>"
                  "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"#ff7f0e\"/>\n",
                  x, kH - kB - h1, width, h1, x, kT, width, plot_h - h1);
    svg += buf;
  }
  svg += "<text x=\"520\" y=\"44\" fill=\"#1f77b4\">T1</text><text x=\"560\" y=\"44\" fill=\"#ff7f0e\">T2</text>\n";
  return svg + "</svg>\n";
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("missing artifact: " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

}  // namespace

fs::path emit_report(const fs::path& run_dir) {
  const auto loss_rows = read_csv(run_dir / "loss.csv");
  Series total{"total", "#000000", {}, {}}, scribble{"scribble", "#1f77b4", {}, {}},
      pseudo{"pseudo", "#2ca02c", {}, {}}, hico{"hico", "#d62728", {}, {}},
      reliable{"reliable fraction", "#9467bd", {}, {}};
  for (const auto& r : loss_rows) {
    if (r.size() < 7) throw IoError("malformed loss.csv row");
    const double it = std::stod(r[0]);
    scribble.x.push_back(it), scribble.y.push_back(std::stod(r[1]));
    pseudo.x.push_back(it), pseudo.y.push_back(std::stod(r[2]));
    hico.x.push_back(it), hico.y.push_back(std::stod(r[3]));
    total.x.push_back(it), total.y.push_back(std::stod(r[4]));
    reliable.x.push_back(it), reliable.y.push_back(std::stod(r[5]));
  }
  std::vector<SelectionRecord> log;
  if (fs::exists(run_dir / "selection.csv")) {
    for (const auto& r : read_csv(run_dir / "selection.csv")) {
      if (r.size() < 4) throw IoError("malformed selection.csv row");
      log.push_back({std::stoll(r[0]), r[1] == "T1" ? Teacher::kT1 : Teacher::kT2, std::stod(r[2]),
                     std::stod(r[3])});
    }
  }
  const int64_t bin = std::max<int64_t>(1, static_cast<int64_t>(log.size()) / 40);
  const auto bins = selection_fractions(log, bin);

  constexpr size_t kMaxPoints = 400;
  write_text(run_dir / "loss_curve.svg",
             line_chart("Training losses",
                        {downsample(total, kMaxPoints), downsample(scribble, kMaxPoints),
                         downsample(pseudo, kMaxPoints), downsample(hico, kMaxPoints)},
                        "iteration"));
  write_text(run_dir / "selection.svg", selection_chart(bins));
  write_text(run_dir / "reliable_fraction.svg",
             line_chart("Reliable pseudo-label fraction", {downsample(reliable, kMaxPoints)}, "iteration"));

  json meta = json::object();
  if (std::ifstream mf(run_dir / "train_meta.json"); mf) {
    try {
      mf >> meta;
    } catch (const json::exception& e) {
      throw IoError("malformed train_meta.json: " + std::string(e.what()));
    }
  }
  std::ostringstream md;
  char buf[256];
  md << "# Training report\n\n";
  md << "- iterations logged: " << loss_rows.size() << "\n";
  if (!loss_rows.empty()) {
    const size_t tail = std::min<size_t>(50, loss_rows.size());
    double s = 0, p = 0, hc = 0, t = 0;
    for (size_t i = loss_rows.size() - tail; i < loss_rows.size(); ++i) {
      s += scribble.y[i], p += pseudo.y[i], hc += hico.y[i], t += total.y[i];
    }
    const double n = static_cast<double>(tail);
    std::snprintf(buf, sizeof(buf),
                  "- mean of the last %zu steps: total %.4f, scribble %.4f, pseudo %.4f, hico %.4f\n",
                  tail, t / n, s / n, p / n, hc / n);
    md << buf;
  }
  if (!log.empty()) {
    int64_t t1 = 0;
    for (const auto& r : log) t1 += r.selected == Teacher::kT1 ? 1 : 0;
    std::snprintf(buf, sizeof(buf), "- teacher selections: T1 %lld, T2 %lld\n", static_cast<long long>(t1),
                  static_cast<long long>(log.size()) - static_cast<long long>(t1));
    md << buf;
  }
  auto dice_line = [&md, &buf](const char* label, const json& v) {
    if (v.is_number()) {
      std::snprintf(buf, sizeof(buf), "- %s mean Dice: %.4f\n", label, v.get<double>());
      md << buf;
    }
  };
  if (meta.contains("best_val_dice")) dice_line("best validation", meta["best_val_dice"]);
  if (meta.contains("final_val_dice")) dice_line("final validation", meta["final_val_dice"]);
  if (meta.contains("final_test")) dice_line("final test", meta["final_test"].value("mean", json()));
  if (meta.contains("best_test")) dice_line("best-checkpoint test", meta["best_test"].value("mean", json()));
  md << "\n![losses](loss_curve.svg)\n\n![selection](selection.svg)\n\n"
        "![reliable fraction](reliable_fraction.svg)\n";
  const fs::path out = run_dir / "report.md";
  write_text(out, md.str());
  return out;
}

}  // namespace sdtlab
