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

#include <cmath>
#include <limits>
#include <random>

#include "helpers.hpp"
#include "sdtlab/error.hpp"
#include "sdtlab/losses.hpp"

using namespace sdtlab;
using sdtlab::testing::random_normal;
using sdtlab::testing::reference_softmax;

namespace {

// N×K×1×1 probabilities from explicit rows.
TensorD probs_of(const std::vector<std::vector<double>>& rows) {
  const auto n = static_cast<int64_t>(rows.size()), k = static_cast<int64_t>(rows[0].size());
  TensorD p({n, k, 1, 1});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t c = 0; c < k; ++c) p[i * k + c] = rows[static_cast<size_t>(i)][static_cast<size_t>(c)];
  }
  return p;
}

LabelMap labels_of(const std::vector<uint8_t>& v) {
  return LabelMap({static_cast<int64_t>(v.size()), 1, 1}, v);
}

LabelMap random_labels(const Shape& shape, int k, double ignore_rate, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, k - 1);
  LabelMap l(shape);
  for (auto& v : l.span()) v = u(rng) < ignore_rate ? kIgnore : static_cast<uint8_t>(cls(rng));
  return l;
}

Tensor<uint8_t> random_mask(const Shape& shape, double rate, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution b(rate);
  Tensor<uint8_t> m(shape);
  for (auto& v : m.span()) v = b(rng) ? 1 : 0;
  return m;
}

// Pixel-loop references, written without the library helpers.
double ref_masked_ce(const TensorD& p, const LabelMap& l, const Tensor<uint8_t>* mask) {
  const int64_t n = p.dim(0), k = p.dim(1), hw = p.dim(2) * p.dim(3);
  double s = 0;
  int64_t cnt = 0;
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t i = 0; i < hw; ++i) {
      const uint8_t y = l[b * hw + i];
      const bool use = mask ? (*mask)[b * hw + i] != 0 : y != kIgnore;
      if (!use) continue;
      s -= std::log(std::max(p[(b * k + y) * hw + i], kProbEps));
      ++cnt;
    }
  }
  return cnt ? s / static_cast<double>(cnt) : 0.0;
}

double ref_dice(const TensorD& p, const LabelMap& l, const Tensor<uint8_t>& mask) {
  const int64_t n = p.dim(0), k = p.dim(1), hw = p.dim(2) * p.dim(3);
  double total = 0;
  int used = 0;
  bool any = false;
  for (int64_t c = 0; c < k; ++c) {
    double inter = 0, ps = 0, gs = 0;
    for (int64_t b = 0; b < n; ++b) {
      for (int64_t i = 0; i < hw; ++i) {
        if (!mask[b * hw + i]) continue;
        any = true;
        const double g = l[b * hw + i] == c ? 1.0 : 0.0;
        inter += p[(b * k + c) * hw + i] * g;
        ps += p[(b * k + c) * hw + i];
        gs += g;
      }
    }
    if (ps + gs == 0) continue;
    total += (2 * inter + kDiceEps) / (ps + gs + kDiceEps);
    ++used;
  }
  return (!any || used == 0) ? 0.0 : 1.0 - total / used;
}

double ref_consistency(const TensorD& a, const TensorD& b) {
  const int64_t n = a.dim(0), per = a.size() / n;
  double l1 = 0, cos = 0;
  for (int64_t i = 0; i < a.size(); ++i) l1 += std::abs(a[i] - b[i]);
  for (int64_t s = 0; s < n; ++s) {
    double d = 0, x = 0, y = 0;
    for (int64_t i = s * per; i < (s + 1) * per; ++i) d += a[i] * b[i], x += a[i] * a[i], y += b[i] * b[i];
    cos += 1.0 - d / std::sqrt(x * y);
  }
  return 0.5 * (l1 / static_cast<double>(a.size()) + cos / static_cast<double>(n));
}

}  // namespace

TEST_CASE("softmax matches the reference and its backward matches finite differences") {
  const TensorD x = random_normal({2, 3, 4, 4}, 1, 3.0);
  const TensorD p = softmax(x);
  const TensorD r = reference_softmax(x);
  for (int64_t i = 0; i < p.size(); ++i) CHECK(p[i] == doctest::Approx(r[i]).epsilon(1e-14));

  const TensorD w = random_normal(x.shape(), 2);
  const TensorD g = softmax_backward(p, w);
  auto f = [&](const TensorD& z) {
    const TensorD q = softmax(z);
    double s = 0;
    for (int64_t i = 0; i < q.size(); ++i) s += w[i] * q[i];
    return s;
  };
  TensorD z = x;
  for (int64_t i = 0; i < z.size(); i += 5) {
    const double o = z[i];
    z[i] = o + 1e-6;
    const double up = f(z);
    z[i] = o - 1e-6;
    const double dn = f(z);
    z[i] = o;
    CHECK(g[i] == doctest::Approx((up - dn) / 2e-6).epsilon(1e-6));
  }
}

TEST_CASE("softmax survives huge logits") {
  TensorD x({1, 2, 1, 1});
  x[0] = 1e4;
  x[1] = -1e4;
  const TensorD p = softmax(x);
  CHECK(p[0] == 1.0);
  CHECK(p[1] == 0.0);
}

TEST_CASE("pce examples") {
  CHECK(pce_loss(probs_of({{1.0, 0.0}}), labels_of({0})) == doctest::Approx(0.0));
  CHECK(pce_loss(probs_of({{0.5, 0.5}}), labels_of({1})) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(pce_loss(probs_of({{0.5, 0.5}, {0.2, 0.8}}), labels_of({kIgnore, kIgnore})) == 0.0);
  CHECK(pce_loss(probs_of({{0.9, 0.1}, {0.2, 0.8}}), labels_of({0, 1})) ==
        doctest::Approx(0.164252033486018).epsilon(1e-12));
  PceOptions raw;
  raw.unnormalized = true;
  CHECK(pce_loss(probs_of({{0.9, 0.1}, {0.2, 0.8}}), labels_of({0, 1}), {}, raw) ==
        doctest::Approx(-(std::log(0.9) + std::log(0.8))).epsilon(1e-12));
}

TEST_CASE("pce input validation") {
  CHECK_THROWS_AS(pce_loss(probs_of({{0.5, 0.5}}), labels_of({2})), InputError);
  CHECK_THROWS_AS(pce_loss(probs_of({{0.5, 0.5}}), labels_of({0, 1})), InputError);
}

TEST_CASE("pce matches a pixel-loop reference") {
  for (uint64_t s = 0; s < 10; ++s) {
    const TensorD p = reference_softmax(random_normal({2, 4, 6, 6}, s));
    const LabelMap l = random_labels({2, 6, 6}, 4, 0.7, s + 100);
    CHECK(pce_loss(p, l) == doctest::Approx(ref_masked_ce(p, l, nullptr)).epsilon(1e-12));
  }
}

TEST_CASE("pce properties") {
  const TensorD p = reference_softmax(random_normal({1, 3, 5, 5}, 7));
  const LabelMap l = random_labels({1, 5, 5}, 3, 0.6, 8);
  const double base = pce_loss(p, l);

  SUBCASE("predictions at ignored pixels do not matter") {
    TensorD q = p;
    for (int64_t i = 0; i < 25; ++i) {
      if (l[i] != kIgnore) continue;
      q[i] = 1.0;
      q[25 + i] = 0.0;
      q[50 + i] = 0.0;
    }
    CHECK(pce_loss(q, l) == base);
  }
  SUBCASE("lowering the true-class probability raises the loss") {
    for (int64_t i = 0; i < 25; ++i) {
      if (l[i] == kIgnore) continue;
      TensorD q = p;
      const int64_t at = l[i] * 25 + i;
      const int64_t other = ((l[i] + 1) % 3) * 25 + i;
      const double d = q[at] * 0.1;
      q[at] -= d;
      q[other] += d;
      CHECK(pce_loss(q, l) > base);
    }
  }
  SUBCASE("zero exactly when annotated pixels are certain") {
    TensorD q(p.shape(), 0.0);
    for (int64_t i = 0; i < 25; ++i) q[(l[i] == kIgnore ? 0 : l[i]) * 25 + i] = 1.0;
    CHECK(pce_loss(q, l) == 0.0);
    CHECK(base > 0.0);
  }
}

TEST_CASE("masked cross entropy matches a pixel-loop reference") {
  const TensorD p = reference_softmax(random_normal({2, 3, 4, 4}, 9));
  const LabelMap l = random_labels({2, 4, 4}, 3, 0.0, 10);
  const auto m = random_mask({2, 4, 4}, 0.5, 11);
  CHECK(masked_ce_loss(p, l, m) == doctest::Approx(ref_masked_ce(p, l, &m)).epsilon(1e-12));
  CHECK(masked_ce_loss(p, l, Tensor<uint8_t>({2, 4, 4}, 0)) == 0.0);
}

TEST_CASE("masked dice examples") {
  SUBCASE("one-hot agreement") {
    const TensorD p = probs_of({{1, 0, 0}, {0, 0, 1}, {0, 1, 0}});
    const double v = masked_dice_loss(p, labels_of({0, 2, 1}), Tensor<uint8_t>({3, 1, 1}, 1));
    CHECK(v == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(v <= 1e-5);
  }
  SUBCASE("empty reliable set") {
    const TensorD p = probs_of({{0.3, 0.7}});
    TensorD g(p.shape(), 0.0);
    CHECK(masked_dice_loss(p, labels_of({1}), Tensor<uint8_t>({1, 1, 1}, 0), {&g}) == 0.0);
    for (double v : g.values()) CHECK(v == 0.0);
  }
  SUBCASE("single reliable pixel, two classes, even split") {
    const double v = masked_dice_loss(probs_of({{0.5, 0.5}}), labels_of({1}), Tensor<uint8_t>({1, 1, 1}, 1));
    CHECK(v == doctest::Approx(2.0 / 3.0).epsilon(1e-4));
  }
}

TEST_CASE("masked dice matches a brute-force soft Dice") {
  for (uint64_t s = 0; s < 20; ++s) {
    const TensorD p = reference_softmax(random_normal({2, 4, 5, 5}, s + 20, 2.0));
    const LabelMap l = random_labels({2, 5, 5}, 4, 0.0, s + 40);
    const auto m = random_mask({2, 5, 5}, 0.3, s + 60);
    CHECK(masked_dice_loss(p, l, m) == doctest::Approx(ref_dice(p, l, m)).epsilon(1e-12));
  }
}

TEST_CASE("classes with no mass and no labels are left out of the Dice mean") {
  // Class 2 carries zero probability and no label: the result matches K=2.
  const TensorD p3 = probs_of({{0.6, 0.4, 0.0}, {0.1, 0.9, 0.0}});
  const TensorD p2 = probs_of({{0.6, 0.4}, {0.1, 0.9}});
  const auto m = Tensor<uint8_t>({2, 1, 1}, 1);
  CHECK(masked_dice_loss(p3, labels_of({0, 1}), m) == doctest::Approx(masked_dice_loss(p2, labels_of({0, 1}), m)));
}

TEST_CASE("pseudo loss") {
  PseudoLabelMap pl;
  pl.labels = labels_of({0, 1, 1});
  pl.reliable = Tensor<uint8_t>({3, 1, 1}, 1);
  const TensorD perfect = probs_of({{1, 0}, {0, 1}, {0, 1}});
  CHECK(pseudo_loss(perfect, pl) == doctest::Approx(0.0).epsilon(1e-9));

  const TensorD p = probs_of({{0.6, 0.4}, {0.3, 0.7}, {0.5, 0.5}});
  const double expect = 0.5 * (masked_ce_loss(p, pl.labels, pl.reliable) + masked_dice_loss(p, pl.labels, pl.reliable));
  CHECK(pseudo_loss(p, pl) == doctest::Approx(expect).epsilon(1e-14));

  pl.reliable.fill(0);
  CHECK(pseudo_loss(p, pl) == 0.0);
}

TEST_CASE("feature consistency examples") {
  const TensorD a({1, 2}, std::vector<double>{1, 0});
  CHECK(feature_consistency(a, a) == 0.0);
  CHECK(feature_consistency(a, TensorD({1, 2}, std::vector<double>{-1, 0})) == doctest::Approx(1.5));
  CHECK(feature_consistency(a, TensorD({1, 2}, std::vector<double>{0, 1})) == doctest::Approx(1.0));
  CHECK_THROWS_AS(feature_consistency(a, TensorD({1, 3})), InputError);
}

TEST_CASE("feature consistency properties") {
  for (uint64_t s = 0; s < 10; ++s) {
    const TensorD a = random_normal({2, 3, 4, 4}, s);
    const TensorD b = random_normal({2, 3, 4, 4}, s + 50);
    const double v = feature_consistency(a, b);
    CHECK(v == doctest::Approx(ref_consistency(a, b)).epsilon(1e-12));
    CHECK(v > 0.0);
    CHECK(v == doctest::Approx(feature_consistency(b, a)).epsilon(1e-14));
    TensorD neg = a;
    for (auto& x : neg.span()) x = -x;
    // Opposite features: the cosine term reaches its upper end of 2.
    double mean_abs = 0;
    for (double x : a.values()) mean_abs += std::abs(x);
    mean_abs /= static_cast<double>(a.size());
    CHECK(feature_consistency(a, neg) == doctest::Approx(0.5 * (2.0 * mean_abs + 2.0)).epsilon(1e-12));
    CHECK(feature_consistency(a, a) == 0.0);
  }
  // Scaling the teacher leaves the cosine term alone, so only the L1 part moves.
  const TensorD a({1, 2}, std::vector<double>{3, 4});
  const TensorD b({1, 2}, std::vector<double>{6, 8});
  CHECK(feature_consistency(a, b) == doctest::Approx(0.5 * 3.5));
}

TEST_CASE("hico examples") {
  FeatureTaps s{TensorD({1, 2}, std::vector<double>{1, 0}), TensorD({1, 2}, std::vector<double>{2, 0})};
  FeatureTaps t{TensorD({1, 2}, std::vector<double>{0, 1}), TensorD({1, 2}, std::vector<double>{-2, 0})};
  CHECK(hico_loss(s, s) == 0.0);
  // Level losses 1.0 (low) and 2.0 (high).
  CHECK(feature_consistency(s.low, t.low) == doctest::Approx(1.0));
  CHECK(feature_consistency(s.high, t.high) == doctest::Approx(2.0));
  CHECK(hico_loss(s, t) == doctest::Approx(1.5));
  const FeatureTaps s_sw{s.high, s.low}, t_sw{t.high, t.low};
  CHECK(hico_loss(s_sw, t_sw) == hico_loss(s, t));
  CHECK_THROWS_AS(hico_loss(s, FeatureTaps{TensorD({1, 3}), t.high}), InputError);
}

TEST_CASE("total loss") {
  CHECK(total_loss(0, 0, 0).total == 0.0);
  const LossBreakdown b = total_loss(0.5, 0.25, 0.25);
  CHECK(b.total == 1.0);
  CHECK(b.scribble == 0.5);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int i = 0; i < 100; ++i) {
    const double a = u(rng), p = u(rng), h = u(rng);
    const LossBreakdown r = total_loss(a, p, h);
    CHECK(r.total == (a + p) + h);
    CHECK(r.total >= std::max({a, p, h}));
  }
  CHECK_THROWS_WITH_AS(total_loss(0.1, std::numeric_limits<double>::quiet_NaN(), 0.0),
                       doctest::Contains("pseudo"), NumericalError);
  CHECK_THROWS_WITH_AS(total_loss(0.1, 0.0, INFINITY), doctest::Contains("hico"), NumericalError);
}

TEST_CASE("gradient sinks accumulate with their scale") {
  const TensorD p = reference_softmax(random_normal({1, 3, 4, 4}, 70));
  const LabelMap l = random_labels({1, 4, 4}, 3, 0.5, 71);
  TensorD once(p.shape(), 0.0), twice(p.shape(), 0.0);
  pce_loss(p, l, {&once, 2.0});
  pce_loss(p, l, {&twice});
  pce_loss(p, l, {&twice});
  for (int64_t i = 0; i < p.size(); ++i) CHECK(once[i] == doctest::Approx(twice[i]).epsilon(1e-14));
}
