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

#include <array>
#include <deque>
#include <set>
#include <fstream>

#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "sdtlab/error.hpp"
#include "sdtlab/losses.hpp"
#include "sdtlab/phantom.hpp"

using namespace sdtlab;
using sdtlab::testing::TempDir;

namespace {

DatasetSpec default_spec() {
  DatasetSpec s;
  s.n_train = 4;
  s.n_val = 1;
  s.n_test = 1;
  return s;
}

// 8-connected flood fill from the LV through anything that is not MYO.
bool lv_enclosed_by_myo(const Tensor<uint8_t>& mask) {
  const int h = static_cast<int>(mask.dim(0)), w = static_cast<int>(mask.dim(1));
  std::vector<uint8_t> seen(static_cast<size_t>(h * w), 0);
  std::deque<int> q;
  for (int i = 0; i < h * w; ++i) {
    if (mask[i] == kLeftVentricle) {
      seen[static_cast<size_t>(i)] = 1;
      q.push_back(i);
    }
  }
  if (q.empty()) return false;
  while (!q.empty()) {
    const int cur = q.front();
    q.pop_front();
    if (mask[cur] == kBackground || mask[cur] == kRightVentricle) return false;
    const int y = cur / w, x = cur % w;
    if (y == 0 || x == 0 || y == h - 1 || x == w - 1) return false;
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int j = (y + dy) * w + (x + dx);
        if (mask[j] == kMyocardium || seen[static_cast<size_t>(j)]) continue;
        seen[static_cast<size_t>(j)] = 1;
        q.push_back(j);
      }
    }
  }
  return true;
}

}  // namespace

TEST_CASE("dataset parameter validation") {
  DatasetSpec s = default_spec();
  CHECK_NOTHROW(s.validate());
  s.image_size = 60;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.image_size = 64;
  s.num_classes = 1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.num_classes = 5;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK_THROWS_AS(generate_phantom(s, 0), ConfigError);
}

TEST_CASE("fewer classes fold the highest labels together") {
  DatasetSpec s = default_spec();
  const PhantomSample full = generate_phantom(s, 0);
  s.num_classes = 3;
  const PhantomSample folded = generate_phantom(s, 0);
  for (int64_t i = 0; i < full.mask.size(); ++i) {
    CHECK(folded.mask[i] == std::min<uint8_t>(full.mask[i], 2));
    if (folded.scribble[i] != kIgnore) CHECK(folded.scribble[i] == folded.mask[i]);
  }
}

TEST_CASE("sample ids are unique across splits") {
  DatasetSpec s = default_spec();
  std::set<std::string> ids;
  for (int i = 0; i < s.total(); ++i) ids.insert(s.sample_id(i));
  CHECK(ids.size() == static_cast<size_t>(s.total()));
  CHECK(s.locate(0).first == Split::kTrain);
  CHECK(s.locate(4).first == Split::kVal);
  CHECK(s.locate(5).first == Split::kTest);
}

TEST_CASE("generation is deterministic and seed sensitive") {
  DatasetSpec s = default_spec();
  const PhantomSample a = generate_phantom(s, 0);
  const PhantomSample b = generate_phantom(s, 0);
  CHECK(a == b);
  DatasetSpec s1 = s;
  s1.seed = 1;
  CHECK(generate_phantom(s1, 0).mask != a.mask);
  CHECK(generate_phantom(s, 1).mask != a.mask);
}

TEST_CASE("myocardium encloses the left ventricle") {
  DatasetSpec s = default_spec();
  CHECK(lv_enclosed_by_myo(generate_phantom(s, 0).mask));
  s.n_train = 40;
  for (int i = 0; i < 40; ++i) {
    s.seed = static_cast<uint64_t>(i % 4);
    CAPTURE(i);
    CHECK(lv_enclosed_by_myo(generate_phantom(s, i).mask));
  }
}

TEST_CASE("image values lie in [0, 1] and bright pools differ from the wall") {
  const PhantomSample p = generate_phantom(default_spec(), 2);
  double lv = 0, myo = 0;
  int nl = 0, nm = 0;
  for (int64_t i = 0; i < p.image.size(); ++i) {
    CHECK(p.image[i] >= 0.0f);
    CHECK(p.image[i] <= 1.0f);
    if (p.mask[i] == kLeftVentricle) lv += p.image[i], ++nl;
    if (p.mask[i] == kMyocardium) myo += p.image[i], ++nm;
  }
  CHECK(lv / nl > myo / nm + 0.2);
}

TEST_CASE("scribbles agree with the dense mask and respect the coverage cap") {
  DatasetSpec s = default_spec();
  s.n_train = 10;
  double total_fraction = 0.0;
  for (int i = 0; i < 100; ++i) {
    s.seed = static_cast<uint64_t>(i / 10);
    const PhantomSample p = generate_phantom(s, i % 10);
    std::array<int64_t, 4> area{}, marked{};
    int64_t labeled = 0;
    for (int64_t j = 0; j < p.mask.size(); ++j) {
      ++area[p.mask[j]];
      if (p.scribble[j] != kIgnore) {
        REQUIRE(p.scribble[j] == p.mask[j]);
        ++marked[p.scribble[j]];
        ++labeled;
      }
    }
    const double frac = static_cast<double>(labeled) / static_cast<double>(p.mask.size());
    CHECK(frac > 0.0);
    CHECK(frac <= 0.2);
    total_fraction += frac;
    for (int c = 0; c < 4; ++c) {
      if (area[c] >= 10) CHECK(marked[c] >= 1);
    }
  }
  MESSAGE("mean labeled fraction " << total_fraction / 100.0);
}

TEST_CASE("scribble synthesis edge cases") {
  Rng rng(3);
  SUBCASE("all background") {
    Tensor<uint8_t> mask({32, 32}, 0);
    const auto sc = synthesize_scribbles(mask, 4, rng);
    int64_t n = 0;
    for (uint8_t v : sc.values()) {
      CHECK((v == kIgnore || v == 0));
      n += v == 0;
    }
    CHECK(n > 0);
  }
  SUBCASE("tight cap") {
    const PhantomSample p = generate_phantom(default_spec(), 0);
    const auto sc = synthesize_scribbles(p.mask, 4, rng, 0.01);
    CHECK(count_labeled(sc) <= static_cast<int64_t>(0.01 * 64 * 64));
  }
  SUBCASE("label out of range") {
    Tensor<uint8_t> mask({16, 16}, 5);
    CHECK_THROWS_AS(synthesize_scribbles(mask, 4, rng), InputError);
  }
}

TEST_CASE("skeleton of a bar is one pixel thick and inside the region") {
  Tensor<uint8_t> bar({16, 32}, 0);
  for (int y = 5; y < 10; ++y) {
    for (int x = 3; x < 29; ++x) bar.at(y, x) = 1;
  }
  const auto sk = skeletonize(bar);
  int64_t n = 0;
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 32; ++x) {
      if (sk.at(y, x)) {
        CHECK(bar.at(y, x) == 1);
        ++n;
      }
    }
  }
  CHECK(n > 10);
  for (int x = 8; x < 24; ++x) {
    int col = 0;
    for (int y = 0; y < 16; ++y) col += sk.at(y, x);
    CHECK(col == 1);
  }
}

TEST_CASE("augmentation") {
  const PhantomSample p = generate_phantom(default_spec(), 1);

  SUBCASE("identity draw leaves the sample unchanged") {
    CHECK(apply_transform(p, SpatialTransform{}) == p);
  }
  SUBCASE("180 degree rotation twice is the identity") {
    SpatialTransform t;
    t.quarter_turns = 2;
    CHECK(apply_transform(apply_transform(p, t), t) == p);
  }
  SUBCASE("four quarter turns and double flips are the identity") {
    SpatialTransform q;
    q.quarter_turns = 1;
    PhantomSample r = p;
    for (int i = 0; i < 4; ++i) r = apply_transform(r, q);
    CHECK(r == p);
    SpatialTransform f;
    f.flip_horizontal = true;
    f.flip_vertical = true;
    CHECK(apply_transform(apply_transform(p, f), f) == p);
  }
  SUBCASE("quarter turn direction") {
    Tensor<uint8_t> m({4, 4}, 0);
    m.at(0, 3) = 1;  // top-right corner
    PhantomSample s{"x", TensorF({4, 4}, 0.0f), m, m};
    SpatialTransform q;
    q.quarter_turns = 1;
    // Counter-clockwise: top-right moves to top-left.
    CHECK(apply_transform(s, q).mask.at(0, 0) == 1);
  }
  SUBCASE("labeled pixel count is preserved by discrete transforms") {
    Rng rng(11);
    for (int i = 0; i < 20; ++i) {
      const SpatialTransform t = draw_transform(rng);
      CHECK(count_labeled(apply_transform(p, t).scribble) == count_labeled(p.scribble));
    }
  }
  SUBCASE("continuous rotation keeps labels categorical") {
    SpatialTransform t;
    t.angle_deg = 13.0;
    const PhantomSample r = apply_transform(p, t);
    for (int64_t i = 0; i < r.mask.size(); ++i) {
      CHECK(r.mask[i] < 4);
      if (r.scribble[i] != kIgnore) CHECK(r.scribble[i] < 4);
    }
  }
  SUBCASE("pCE is invariant when predictions follow the transform") {
    const int h = p.height(), w = p.width();
    const TensorD probs = testing::reference_softmax(testing::random_normal({1, 4, h, w}, 5));
    LabelMap scrib({1, h, w});
    std::copy(p.scribble.data(), p.scribble.data() + p.scribble.size(), scrib.data());
    const double base = pce_loss(probs, scrib);
    Rng rng(17);
    for (int i = 0; i < 8; ++i) {
      const SpatialTransform t = draw_transform(rng);
      const auto perm = pixel_permutation(h, w, t);
      const PhantomSample a = apply_transform(p, t);
      TensorD tp(probs.shape());
      for (int c = 0; c < 4; ++c) {
        for (int64_t j = 0; j < h * w; ++j) tp[c * h * w + j] = probs[c * h * w + perm[static_cast<size_t>(j)]];
      }
      LabelMap ts({1, h, w});
      std::copy(a.scribble.data(), a.scribble.data() + a.scribble.size(), ts.data());
      CHECK(pce_loss(tp, ts) == doctest::Approx(base).epsilon(1e-12));
    }
  }
}

TEST_CASE("dataset round trip") {
  TempDir dir("phantom");
  DatasetSpec s = default_spec();
  s.n_train = 6;
  s.n_val = 2;
  s.n_test = 2;
  const Dataset d = generate_dataset(s);
  save_dataset(dir.path(), d);
  const Dataset back = load_dataset(dir.path());
  CHECK(back.train == d.train);
  CHECK(back.val == d.val);
  CHECK(back.test == d.test);
  CHECK(back.spec.seed == s.seed);
  CHECK(dataset_fingerprint(back) == dataset_fingerprint(d));

  SUBCASE("wrong dimensions in the manifest") {
    nlohmann::json m;
    std::ifstream(dir.path() / "manifest.json") >> m;
    m["height"] = 32;
    m["width"] = 32;
    std::ofstream(dir.path() / "manifest.json") << m.dump();
    CHECK_THROWS_WITH_AS(load_dataset(dir.path()), doctest::Contains("shape mismatch"), IoError);
  }
  SUBCASE("unknown format version") {
    nlohmann::json m;
    std::ifstream(dir.path() / "manifest.json") >> m;
    m["format_version"] = 99;
    std::ofstream(dir.path() / "manifest.json") << m.dump();
    CHECK_THROWS_AS(load_dataset(dir.path()), IoError);
  }
}

TEST_CASE("loading an empty directory reports the missing manifest") {
  TempDir dir("empty");
  CHECK_THROWS_WITH_AS(load_dataset(dir.path()), doctest::Contains("manifest"), IoError);
}
