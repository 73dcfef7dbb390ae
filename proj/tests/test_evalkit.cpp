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

#include <doctest.h>

#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "sdtlab/error.hpp"
#include "sdtlab/evalkit.hpp"

using namespace sdtlab;
using sdtlab::testing::TempDir;

namespace {

LabelMap random_mask(int64_t h, int64_t w, int k, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> cls(0, k - 1);
  LabelMap m({h, w});
  for (auto& v : m.span()) v = static_cast<uint8_t>(cls(rng));
  return m;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("dice examples") {
  const LabelMap a = random_mask(8, 8, 4, 1);
  const DiceReport same = dice_score(a, a, 4);
  for (int c = 1; c < 4; ++c) CHECK(same.per_class.at(c) == 1.0);
  CHECK(same.mean == 1.0);

  LabelMap p({2, 4}, 0), t({2, 4}, 0);
  for (int i = 0; i < 4; ++i) p[i] = 1;      // top row predicted class 1
  for (int i = 4; i < 8; ++i) t[i] = 1;      // bottom row is class 1
  CHECK(dice_score(p, t, 2).per_class.at(1) == 0.0);

  LabelMap q({2, 4}, 0);
  q[0] = q[1] = q[4] = q[5] = 1;  // 4 predicted, 2 of them overlap the truth
  CHECK(dice_score(q, t, 2).per_class.at(1) == 0.5);
  CHECK_THROWS_AS(dice_score(q, LabelMap({4, 2}), 2), InputError);
}

TEST_CASE("dice excludes classes absent from both masks and background") {
  LabelMap p({1, 4}, std::vector<uint8_t>{0, 1, 1, 0});
  LabelMap t({1, 4}, std::vector<uint8_t>{0, 1, 3, 0});
  const DiceReport r = dice_score(p, t, 4);
  CHECK(r.per_class.count(0) == 0);
  CHECK(r.per_class.count(2) == 0);
  CHECK(r.per_class.at(1) == doctest::Approx(2.0 / 3.0));
  CHECK(r.per_class.at(3) == 0.0);
  CHECK(r.mean == doctest::Approx(1.0 / 3.0));
  CHECK(dice_score(LabelMap({2, 2}, 0), LabelMap({2, 2}, 0), 4).mean == 0.0);
}

TEST_CASE("dice is symmetric") {
  for (uint64_t s = 0; s < 20; ++s) {
    const LabelMap a = random_mask(6, 6, 4, s), b = random_mask(6, 6, 4, s + 100);
    const DiceReport ab = dice_score(a, b, 4), ba = dice_score(b, a, 4);
    CHECK(ab.per_class == ba.per_class);
    CHECK(ab.mean == ba.mean);
  }
}

TEST_CASE("aggregation averages each class over the samples that score it") {
  DiceReport x, y;
  x.per_class = {{1, 1.0}, {2, 0.5}};
  x.samples = 1;
  y.per_class = {{1, 0.0}};
  y.samples = 1;
  const DiceReport r = aggregate_dice({x, y}, 4);
  CHECK(r.per_class.at(1) == 0.5);
  CHECK(r.per_class.at(2) == 0.5);
  CHECK(r.per_class.count(3) == 0);
  CHECK(r.mean == 0.5);
  CHECK(r.samples == 2);
  const auto j = dice_to_json(r);
  CHECK(j["per_class"]["RV"] == 0.5);
  CHECK(j["per_class"]["MYO"] == 0.5);
  CHECK(j["samples"] == 2);
}

TEST_CASE("slice-by-slice volume evaluation") {
  const NetworkWeights w = build(testing::tiny_backbone(4, ComputePrecision::kFloat32), 3);
  const TensorF vol = tensor_cast<float>(testing::random_normal({3, 16, 16}, 4));
  const LabelMap pred = evaluate_volume(w, vol);
  CHECK(pred.shape() == Shape{3, 16, 16});
  CHECK(evaluate_volume(w, vol) == pred);

  // Each slice alone gives the same answer, and reversing slices reverses output.
  TensorF rev(vol.shape());
  for (int z = 0; z < 3; ++z) {
    TensorF one({1, 16, 16});
    std::copy(vol.data() + z * 256, vol.data() + (z + 1) * 256, one.data());
    const LabelMap single = evaluate_volume(w, one);
    CHECK(std::equal(single.values().begin(), single.values().end(), pred.data() + z * 256));
    std::copy(vol.data() + z * 256, vol.data() + (z + 1) * 256, rev.data() + (2 - z) * 256);
  }
  const LabelMap rp = evaluate_volume(w, rev);
  for (int z = 0; z < 3; ++z) {
    CHECK(std::equal(rp.data() + (2 - z) * 256, rp.data() + (3 - z) * 256, pred.data() + z * 256));
  }

  CHECK_THROWS_AS(evaluate_volume(w, TensorF({1, 1, 16, 16})), InputError);
  CHECK_THROWS_AS(evaluate_volume(w, TensorF({1, 20, 20})), InputError);
}

TEST_CASE("constant logits resolve to class 0") {
  // Zero weights give identical logits for every class.
  const NetworkWeights z = zeros_like(build(testing::tiny_backbone(), 0));
  const LabelMap pred = evaluate_volume(z, tensor_cast<float>(testing::random_normal({2, 16, 16}, 1)));
  for (uint8_t v : pred.values()) CHECK(v == 0);
}

TEST_CASE("avg policy averages teacher outputs") {
  ModelOutput a, b;
  a.logits = testing::random_normal({1, 3, 2, 2}, 1, 2.0);
  b.logits = testing::random_normal({1, 3, 2, 2}, 2, 2.0);
  a.taps = {testing::random_normal({1, 2, 2, 2}, 3), testing::random_normal({1, 2, 1, 1}, 4)};
  b.taps = {testing::random_normal({1, 2, 2, 2}, 5), testing::random_normal({1, 2, 1, 1}, 6)};
  const AvgPolicyResult r = avg_policy(a, b, 0.6);
  const TensorD pa = softmax(a.logits), pb = softmax(b.logits);
  for (int64_t i = 0; i < pa.size(); ++i) CHECK(r.probs[i] == doctest::Approx(0.5 * (pa[i] + pb[i])));
  CHECK(r.taps.low[3] == doctest::Approx(0.5 * (a.taps.low[3] + b.taps.low[3])));
  const PseudoLabelMap direct = pick_reliable_pixels(r.probs, 0.6);
  CHECK(r.pseudo.labels == direct.labels);
  CHECK(r.pseudo.reliable == direct.reliable);
}

TEST_CASE("ablation grid structure") {
  const auto rows = ablation_rows();
  REQUIRE(rows.size() == 7);
  std::set<std::tuple<int, int, bool, bool>> keys;
  for (const auto& r : rows) keys.insert({static_cast<int>(r.teachers), static_cast<int>(r.policy), r.prp, r.hico});
  CHECK(keys.size() == 7);
  CHECK(rows.front().teachers == TeacherMode::kSingle);
  CHECK_FALSE(rows.front().prp);
  CHECK_FALSE(rows.front().hico);
  const auto& full = rows.back();
  CHECK(full.teachers == TeacherMode::kDual);
  CHECK(full.policy == PseudoPolicy::kDts);
  CHECK(full.prp);
  CHECK(full.hico);
  int avg = 0, single = 0;
  for (const auto& r : rows) {
    avg += r.policy == PseudoPolicy::kAvg;
    single += r.teachers == TeacherMode::kSingle;
    TrainConfig c = testing::tiny_train_config(10, 5);
    c.teachers = r.teachers;
    c.policy = r.policy;
    CHECK_NOTHROW(c.validate(4));
  }
  CHECK(avg == 1);
  CHECK(single == 2);
}

TEST_CASE("fairness hash") {
  const Dataset ds = testing::tiny_dataset(2, 0, 1);
  TrainConfig c = testing::tiny_train_config(10, 5);
  const uint64_t h = fairness_hash(c, ds);
  TrainConfig row = c;
  row.teachers = TeacherMode::kSingle;
  row.policy = PseudoPolicy::kNone;
  row.hico = false;
  CHECK(fairness_hash(row, ds) == h);
  TrainConfig seeded = c;
  seeded.seed = 9;
  CHECK(fairness_hash(seeded, ds) != h);
  TrainConfig lr = c;
  lr.lr = 0.02;
  CHECK(fairness_hash(lr, ds) != h);
  CHECK(fairness_hash(c, testing::tiny_dataset(2, 0, 1, 32, 1)) != h);
}

TEST_CASE("ablation run") {
  TempDir dir("ablate");
  const Dataset ds = testing::tiny_dataset(4, 0, 2);
  const TrainConfig c = testing::tiny_train_config(4, 2);
  const AblationGrid g = run_ablation(c, ds, dir.path());
  REQUIRE(g.rows.size() == 7);
  CHECK(g.fair);
  for (const auto& r : g.rows) {
    CHECK(r.fairness == g.fairness);
    CHECK(r.dice.samples == 2);
    CHECK_FALSE(r.dice.per_class.empty());
  }
  std::ifstream csv(dir.path() / "ablation.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "row,teachers,pl,prp,hico,LV,MYO,RV,avg,fairness");
  int n = 0;
  while (std::getline(csv, line)) ++n;
  CHECK(n == 7);
  const std::string md = slurp(dir.path() / "ablation.md");
  CHECK(md.find("DTS") != std::string::npos);
  CHECK(md.find("Avg") != std::string::npos);
  CHECK(md == render_ablation_markdown(g));
  for (int i = 1; i <= 7; ++i) CHECK(std::filesystem::exists(dir.path() / ("row" + std::to_string(i)) / "last.ckpt"));
}

TEST_CASE("ablation needs an evaluation split") {
  TempDir dir("ablate_empty");
  CHECK_THROWS_AS(run_ablation(testing::tiny_train_config(2, 1), testing::tiny_dataset(2, 0, 0), dir.path()),
                  InputError);
}

TEST_CASE("gradient check suite") {
  const GradcheckReport r = gradcheck_suite(0, 3);
  std::set<std::string> names;
  for (const auto& e : r.entries) {
    CAPTURE(e.name);
    CHECK(e.passed);
    CHECK(e.max_rel_error < 1e-4);
    CHECK(e.checked > 0);
    names.insert(e.name);
  }
  for (const char* n : {"pce_loss", "masked_dice_loss", "feature_consistency", "hico_loss"}) CHECK(names.count(n) == 1);
  CHECK(r.passed());
  CHECK(r.step == 1e-5);
}

TEST_CASE("selection fractions") {
  std::vector<SelectionRecord> log;
  std::mt19937_64 rng(1);
  for (int i = 0; i < 103; ++i) log.push_back({i, rng() % 3 == 0 ? Teacher::kT1 : Teacher::kT2, 0, 0});
  const auto bins = selection_fractions(log, 10);
  CHECK(bins.size() == 11);
  for (const auto& b : bins) CHECK(b.t1 + b.t2 == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(bins[3].first_iteration == 30);
  CHECK(selection_fractions({}, 5).empty());
  CHECK_THROWS_AS(selection_fractions(log, 0), InputError);
}

TEST_CASE("report") {
  TempDir dir("report");
  SUBCASE("missing loss log") {
    CHECK_THROWS_WITH_AS(emit_report(dir.path()), doctest::Contains("missing artifact"), IoError);
  }
  SUBCASE("complete run") {
    const Dataset ds = testing::tiny_dataset(4, 2, 2);
    TrainConfig c = testing::tiny_train_config(6, 3);
    c.val_every = 3;
    run(c, ds, dir.path());
    const auto path = emit_report(dir.path());
    const std::string md = slurp(path);
    CHECK(md.find("best validation mean Dice") != std::string::npos);
    CHECK(md.find("final test mean Dice") != std::string::npos);
    CHECK(md.find("teacher selections") != std::string::npos);
    for (const char* f : {"loss_curve.svg", "selection.svg", "reliable_fraction.svg"}) {
      CAPTURE(f);
      const std::string svg = slurp(dir.path() / f);
      CHECK(svg.rfind("<svg", 0) == 0);
      CHECK(svg.find("</svg>") != std::string::npos);
    }
  }
}
