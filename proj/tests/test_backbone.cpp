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
#include <fstream>

#include "helpers.hpp"
#include "sdtlab/backbone.hpp"
#include "sdtlab/checkpoint.hpp"
#include "sdtlab/error.hpp"

using namespace sdtlab;
using sdtlab::testing::TempDir;
using sdtlab::testing::tiny_backbone;

namespace {

TensorF random_images(int64_t n, int64_t h, uint64_t seed) {
  return tensor_cast<float>(testing::random_normal({n, 1, h, h}, seed, 0.5));
}

// Scalar probe that touches logits and both taps so every path is exercised.
struct Probe {
  TensorD wl, wlow, whigh;
  double eval(const ModelOutput& o) const {
    double s = 0.0;
    for (int64_t i = 0; i < wl.size(); ++i) s += wl[i] * o.logits[i];
    for (int64_t i = 0; i < wlow.size(); ++i) s += wlow[i] * o.taps.low[i];
    for (int64_t i = 0; i < whigh.size(); ++i) s += whigh[i] * o.taps.high[i];
    return s;
  }
};

}  // namespace

TEST_CASE("default architecture") {
  const BackboneConfig cfg;
  const NetworkWeights w = build(cfg, 0);
  CHECK(w.num_parameters() == 1942340);
  // Classifier maps width[0] channels to K.
  bool found = false;
  for (const auto& p : w.params()) {
    if (p.shape.size() == 4 && p.shape[0] == 4 && p.shape[1] == 16 && p.shape[2] == 1) found = true;
  }
  CHECK(found);

  const ModelOutput out = forward(w, random_images(2, 64, 1));
  CHECK(out.logits.shape() == Shape{2, 4, 64, 64});
  CHECK(out.taps.low.shape() == Shape{2, 16, 64, 64});
  CHECK(out.taps.high.shape() == Shape{2, 128, 8, 8});
}

TEST_CASE("config validation") {
  BackboneConfig c;
  c.widths = {8, 16, 32, 64};
  CHECK_THROWS_AS(build(c, 0), ConfigError);
  c = BackboneConfig{};
  c.norm_groups = 0;
  CHECK_THROWS_AS(build(c, 0), ConfigError);
}

TEST_CASE("initialization is deterministic and seed sensitive") {
  const auto cfg = tiny_backbone();
  const NetworkWeights a = build(cfg, 0), b = build(cfg, 0), c = build(cfg, 1);
  CHECK(a == b);
  CHECK(a.fingerprint() == c.fingerprint());
  CHECK_FALSE(a == c);
  REQUIRE(a.params().size() == c.params().size());
  for (size_t i = 0; i < a.params().size(); ++i) CHECK(a.params()[i].shape == c.params()[i].shape);
}

TEST_CASE("forward rejects bad shapes") {
  const NetworkWeights w = build(tiny_backbone(), 0);
  CHECK_THROWS_AS(forward(w, TensorF({1, 1, 24, 24})), InputError);
  CHECK_THROWS_AS(forward(w, TensorF({1, 2, 32, 32})), InputError);
  CHECK_THROWS_AS(forward(w, TensorF({32, 32})), InputError);
}

TEST_CASE("forward is deterministic and softmax sums to one") {
  const NetworkWeights w = build(tiny_backbone(4, ComputePrecision::kFloat32), 3);
  const TensorF x = random_images(2, 32, 4);
  const ModelOutput a = forward(w, x), b = forward(w, x);
  CHECK(a.logits == b.logits);
  CHECK(a.taps.low == b.taps.low);
  const TensorD p = testing::reference_softmax(a.logits);
  const int64_t hw = 32 * 32;
  for (int64_t n = 0; n < 2; ++n) {
    for (int64_t i = 0; i < hw; i += 7) {
      double s = 0;
      for (int c = 0; c < 4; ++c) s += p[(n * 4 + c) * hw + i];
      CHECK(std::abs(s - 1.0) < 1e-5);
    }
  }
}

TEST_CASE("batch samples are processed independently") {
  const NetworkWeights w = build(tiny_backbone(), 5);
  const TensorF x = random_images(2, 16, 6);
  TensorF second({1, 1, 16, 16});
  std::copy(x.data() + 256, x.data() + 512, second.data());
  const ModelOutput both = forward(w, x), one = forward(w, second);
  for (int64_t i = 0; i < one.logits.size(); ++i) {
    CHECK(both.logits[one.logits.size() + i] == doctest::Approx(one.logits[i]).epsilon(1e-12));
  }
}

TEST_CASE("float32 and float64 compute agree") {
  auto cfg = tiny_backbone(4, ComputePrecision::kFloat64);
  NetworkWeights w = build(cfg, 7);
  const TensorF x = random_images(1, 32, 8);
  const ModelOutput d = forward(w, x);
  w.set_precision(ComputePrecision::kFloat32);
  const ModelOutput f = forward(w, x);
  double max_err = 0.0;
  for (int64_t i = 0; i < d.logits.size(); ++i) max_err = std::max(max_err, std::abs(d.logits[i] - f.logits[i]));
  CHECK(max_err < 1e-3);
}

TEST_CASE("training pass output matches plain forward") {
  const NetworkWeights w = build(tiny_backbone(), 9);
  const TensorF x = random_images(2, 16, 10);
  const TrainingPass pass(w, x);
  const ModelOutput f = forward(w, x);
  CHECK(pass.output().logits == f.logits);
  CHECK(pass.output().taps.high == f.taps.high);
}

TEST_CASE("backward matches central differences") {
  NetworkWeights w = build(tiny_backbone(3), 11);
  const TensorF x = random_images(2, 16, 12);
  const TrainingPass pass(w, x);
  const auto& o = pass.output();
  Probe probe{testing::random_normal(o.logits.shape(), 13), testing::random_normal(o.taps.low.shape(), 14),
              testing::random_normal(o.taps.high.shape(), 15)};
  const NetworkWeights g = pass.backward(probe.wl, &probe.wlow, &probe.whigh);
  REQUIRE(g.fingerprint() == w.fingerprint());

  const double h = 1e-6;
  double worst = 0.0;
  int64_t checked = 0;
  for (size_t pi = 0; pi < w.params().size(); ++pi) {
    auto& vals = w.params()[pi].values;
    const size_t stride = std::max<size_t>(1, vals.size() / 5);
    for (size_t j = 0; j < vals.size(); j += stride) {
      const double orig = vals[j];
      vals[j] = orig + h;
      const double up = probe.eval(forward(w, x));
      vals[j] = orig - h;
      const double dn = probe.eval(forward(w, x));
      vals[j] = orig;
      const double num = (up - dn) / (2 * h);
      const double ana = g.params()[pi].values[j];
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-4});
      CAPTURE(w.params()[pi].name);
      CAPTURE(j);
      CHECK(rel < 1e-4);
      worst = std::max(worst, rel);
      ++checked;
    }
  }
  MESSAGE("checked " << checked << " coordinates, worst relative error " << worst);
}

TEST_CASE("backward leaves the weights untouched") {
  const NetworkWeights w = build(tiny_backbone(), 16);
  const NetworkWeights before = copy_weights(w);
  const TrainingPass pass(w, random_images(1, 16, 17));
  const auto g = pass.backward(testing::random_normal(pass.output().logits.shape(), 18));
  CHECK(w == before);
}

TEST_CASE("copy semantics") {
  const NetworkWeights src = build(tiny_backbone(), 19);
  NetworkWeights c = copy_weights(src);
  CHECK(c == src);
  CHECK(c.fingerprint() == src.fingerprint());
  CHECK(copy_weights(c) == src);
  c.params()[0].values[0] += 1.0;
  CHECK_FALSE(c == src);
  const NetworkWeights z = zeros_like(src);
  for (const auto& p : z.params()) {
    for (double v : p.values) CHECK(v == 0.0);
  }
}

TEST_CASE("weight checkpoints") {
  TempDir dir("ckpt");
  NetworkWeights w = build(tiny_backbone(4, ComputePrecision::kFloat32), 20);

  SUBCASE("float64 round trip is exact") {
    save_weights(dir.path() / "w.ckpt", w, Dtype::kFloat64);
    CHECK(load_weights(dir.path() / "w.ckpt") == w);
  }
  SUBCASE("float32 round trip is exact on float32-representable values") {
    for (auto& p : w.params()) {
      for (double& v : p.values) v = static_cast<float>(v);
    }
    save_weights(dir.path() / "w.ckpt", w);
    const NetworkWeights back = load_weights(dir.path() / "w.ckpt");
    CHECK(back == w);
    CHECK(back.config() == w.config());
  }
  SUBCASE("named sections and metadata") {
    const NetworkWeights other = build(tiny_backbone(4, ComputePrecision::kFloat32), 21);
    save_checkpoint(dir.path() / "multi.ckpt", {{"a", &w}, {"b", &other}}, {{"note", "x"}}, Dtype::kFloat64);
    const Checkpoint ck = load_checkpoint(dir.path() / "multi.ckpt");
    CHECK(ck.has_section("b"));
    CHECK_FALSE(ck.has_section("c"));
    CHECK(ck.section("b") == other);
    CHECK(ck.metadata.at("note") == "x");
    CHECK(load_weights(dir.path() / "multi.ckpt", "a") == w);
    CHECK_THROWS_AS(load_weights(dir.path() / "multi.ckpt", "c"), IoError);
  }
  SUBCASE("truncated file") {
    save_weights(dir.path() / "w.ckpt", w);
    const auto size = std::filesystem::file_size(dir.path() / "w.ckpt");
    std::filesystem::resize_file(dir.path() / "w.ckpt", size - 10);
    CHECK_THROWS_AS(load_weights(dir.path() / "w.ckpt"), IoError);
  }
  SUBCASE("garbage file") {
    std::ofstream(dir.path() / "bad.ckpt") << "not a checkpoint";
    CHECK_THROWS_AS(load_weights(dir.path() / "bad.ckpt"), IoError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_weights(dir.path() / "none.ckpt"), IoError);
  }
}
