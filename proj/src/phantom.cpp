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

#include "sdtlab/phantom.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <deque>
#include <fstream>
#include <numbers>
#include <utility>

#include <nlohmann/json.hpp>

namespace sdtlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* split_name(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw InputError("unknown split '" + name + "' (expected train, val or test)");
}

void DatasetSpec::validate() const {
  // Four drawn structures; fewer classes fold the highest labels together.
  if (num_classes < 2 || num_classes > 4) {
    throw ConfigError("num_classes must be in [2, 4], got " + std::to_string(num_classes));
  }
  if (image_size <= 0 || image_size % 16 != 0) {
    throw ConfigError("image_size must be a positive multiple of 16, got " +
                      std::to_string(image_size));
  }
  if (n_train < 0 || n_val < 0 || n_test < 0) {
    throw ConfigError("split counts must be non-negative");
  }
  if (!(max_scribble_fraction > 0.0 && max_scribble_fraction <= 1.0)) {
    throw ConfigError("max_scribble_fraction must be in (0, 1]");
  }
}

std::pair<Split, int> DatasetSpec::locate(int index) const {
  if (index < 0 || index >= total()) {
    throw InputError("sample index " + std::to_string(index) + " out of range [0, " +
                     std::to_string(total()) + ")");
  }
  if (index < n_train) return {Split::kTrain, index};
  if (index < n_train + n_val) return {Split::kVal, index - n_train};
  return {Split::kTest, index - n_train - n_val};
}

std::string DatasetSpec::sample_id(int index) const {
  auto [split, pos] = locate(index);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%04d", split_name(split), pos);
  return buf;
}

const std::vector<PhantomSample>& Dataset::split(Split s) const {
  switch (s) {
    case Split::kTrain:
      return train;
    case Split::kVal:
      return val;
    case Split::kTest:
      return test;
  }
  return train;
}

std::vector<PhantomSample>& Dataset::split(Split s) {
  return const_cast<std::vector<PhantomSample>&>(std::as_const(*this).split(s));
}

namespace {

struct Ellipse {
  double cy, cx, ry, rx, angle;

  // Normalized radial coordinate; <= 1 inside.
  double rho(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return std::sqrt((u * u) / (rx * rx) + (v * v) / (ry * ry));
  }
};

void box_blur3(std::vector<float>& img, int h, int w) {
  std::vector<float> out(img.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      int n = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          acc += img[static_cast<size_t>(yy * w + xx)];
          ++n;
        }
      }
      out[static_cast<size_t>(y * w + x)] = static_cast<float>(acc / n);
    }
  }
  img.swap(out);
}

uint8_t fold_class(uint8_t label, int num_classes) {
  return static_cast<uint8_t>(std::min<int>(label, num_classes - 1));
}

}  // namespace

PhantomSample generate_phantom(const DatasetSpec& spec, int index) {
  spec.validate();
  PhantomSample sample;
  sample.id = spec.sample_id(index);

  const int size = spec.image_size;
  const double scale = size / 64.0;
  Rng rng = make_rng(spec.seed, Stream::kPhantom, static_cast<uint64_t>(index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  // Geometry: LV disk, MYO annulus around it, RV crescent on the septal side.
  const double lv_cx = size * 0.56 + uniform(-4, 4) * scale;
  const double lv_cy = size * 0.5 + uniform(-5, 5) * scale;
  const double lv_r = uniform(7.0, 11.0) * scale;
  const double lv_aspect = uniform(0.75, 1.0);
  const double orient = uniform(0.0, std::numbers::pi);
  const double wall = uniform(3.0, 5.0) * scale;
  Ellipse lv{lv_cy, lv_cx, lv_r * lv_aspect, lv_r, orient};
  Ellipse myo{lv_cy, lv_cx, lv_r * lv_aspect + wall, lv_r + wall, orient};

  const double rv_dir = std::numbers::pi + uniform(-0.6, 0.6);
  const double rv_r = uniform(9.0, 13.0) * scale;
  const double rv_offset = lv_r + wall + 0.35 * rv_r;
  Ellipse rv{lv_cy + std::sin(rv_dir) * rv_offset, lv_cx + std::cos(rv_dir) * rv_offset,
             rv_r, rv_r * uniform(0.55, 0.8), rv_dir + std::numbers::pi / 2};

  Tensor<uint8_t> mask({size, size}, kBackground);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      uint8_t c = kBackground;
      if (lv.rho(y, x) <= 1.0) {
        c = kLeftVentricle;
      } else if (myo.rho(y, x) <= 1.0) {
        c = kMyocardium;
      } else if (rv.rho(y, x) <= 1.0 && myo.rho(y, x) > 1.08) {
        c = kRightVentricle;
      }
      mask.at(y, x) = c;
    }
  }

  // Intensities. Blood pools are bright, myocardium dark and overlapping the
  // background range; background carries a smooth field and bright distractors.
  const double lv_int = uniform(0.72, 0.92);
  const double rv_int = lv_int * uniform(0.82, 1.0);
  const double myo_int = uniform(0.22, 0.38);
  const double noise_sd = uniform(0.04, 0.08);

  struct Wave {
    double ky, kx, phase, amp;
  };
  std::vector<Wave> waves(3);
  for (auto& wv : waves) {
    wv = {uniform(-3, 3), uniform(-3, 3), uniform(0, 2 * std::numbers::pi), uniform(0.03, 0.08)};
  }
  const int n_blobs = 2 + static_cast<int>(unit(rng) * 3);
  std::vector<std::pair<Ellipse, double>> blobs;
  for (int i = 0; i < n_blobs; ++i) {
    Ellipse b{uniform(0, size), uniform(0, size), uniform(2.0, 5.0) * scale,
              uniform(2.0, 5.0) * scale, uniform(0, std::numbers::pi)};
    blobs.emplace_back(b, uniform(0.45, 0.75));
  }
  const double bg_base = uniform(0.25, 0.4);
  const double bias_gy = uniform(-0.15, 0.15), bias_gx = uniform(-0.15, 0.15);

  std::vector<float> img(static_cast<size_t>(size * size));
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const uint8_t c = mask.at(y, x);
      double v = 0.0;
      if (c == kLeftVentricle) {
        v = lv_int;
      } else if (c == kRightVentricle) {
        v = rv_int;
      } else if (c == kMyocardium) {
        v = myo_int;
      } else {
        v = bg_base;
        const double fy = static_cast<double>(y) / size, fx = static_cast<double>(x) / size;
        for (const auto& wv : waves) {
          v += wv.amp * std::sin(2 * std::numbers::pi * (wv.ky * fy + wv.kx * fx) + wv.phase);
        }
        for (const auto& [b, intensity] : blobs) {
          if (b.rho(y, x) <= 1.0) v = intensity;
        }
      }
      img[static_cast<size_t>(y * size + x)] = static_cast<float>(v);
    }
  }
  box_blur3(img, size, size);
  std::normal_distribution<double> noise(0.0, noise_sd);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double bias = 1.0 + bias_gy * (2.0 * y / size - 1.0) + bias_gx * (2.0 * x / size - 1.0);
      auto& px = img[static_cast<size_t>(y * size + x)];
      px = static_cast<float>(std::clamp(px * bias + noise(rng), 0.0, 1.0));
    }
  }

  for (auto& v : mask.values()) v = fold_class(v, spec.num_classes);
  sample.image = TensorF({size, size}, std::move(img));
  Rng scribble_rng = make_rng(spec.seed, Stream::kScribble, static_cast<uint64_t>(index));
  sample.scribble =
      synthesize_scribbles(mask, spec.num_classes, scribble_rng, spec.max_scribble_fraction);
  sample.mask = std::move(mask);
  return sample;
}

Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  for (int i = 0; i < spec.total(); ++i) {
    const Split split = spec.locate(i).first;
    ds.split(split).push_back(generate_phantom(spec, i));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Scribbles

Tensor<uint8_t> skeletonize(const Tensor<uint8_t>& region) {
  const int h = static_cast<int>(region.dim(0)), w = static_cast<int>(region.dim(1));
  Tensor<uint8_t> img = region;
  auto px = [&](int y, int x) -> int {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0;
    return img[y * w + x] ? 1 : 0;
  };
  std::vector<int64_t> to_clear;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int pass = 0; pass < 2; ++pass) {
      to_clear.clear();
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          if (!px(y, x)) continue;
          // Neighbours P2..P9 clockwise from north.
          const int p[8] = {px(y - 1, x),     px(y - 1, x + 1), px(y, x + 1), px(y + 1, x + 1),
                            px(y + 1, x),     px(y + 1, x - 1), px(y, x - 1), px(y - 1, x - 1)};
          int b = 0;
          for (int v : p) b += v;
          if (b < 2 || b > 6) continue;
          int a = 0;
          for (int i = 0; i < 8; ++i) a += (p[i] == 0 && p[(i + 1) % 8] == 1);
          if (a != 1) continue;
          if (pass == 0) {
            if (p[0] * p[2] * p[4] != 0 || p[2] * p[4] * p[6] != 0) continue;
          } else {
            if (p[0] * p[2] * p[6] != 0 || p[0] * p[4] * p[6] != 0) continue;
          }
          to_clear.push_back(static_cast<int64_t>(y) * w + x);
        }
      }
      for (int64_t i : to_clear) img[i] = 0;
      if (!to_clear.empty()) changed = true;
    }
  }
  return img;
}

namespace {

// Orders skeleton pixels so consecutive entries are 8-adjacent wherever the
// skeleton is connected (depth-first walk from the top-left-most pixel of each
// component).
std::vector<int64_t> trace_order(const Tensor<uint8_t>& skel, int h, int w) {
  std::vector<uint8_t> seen(static_cast<size_t>(h * w), 0);
  std::vector<int64_t> order;
  for (int64_t start = 0; start < static_cast<int64_t>(h) * w; ++start) {
    if (!skel[start] || seen[static_cast<size_t>(start)]) continue;
    std::vector<int64_t> stack{start};
    seen[static_cast<size_t>(start)] = 1;
    while (!stack.empty()) {
      const int64_t cur = stack.back();
      stack.pop_back();
      order.push_back(cur);
      const int y = static_cast<int>(cur / w), x = static_cast<int>(cur % w);
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if ((dy == 0 && dx == 0) || yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          const int64_t j = static_cast<int64_t>(yy) * w + xx;
          if (skel[j] && !seen[static_cast<size_t>(j)]) {
            seen[static_cast<size_t>(j)] = 1;
            stack.push_back(j);
          }
        }
      }
    }
  }
  return order;
}

// Pixel of the region farthest (4-connected BFS distance) from its complement.
int64_t deepest_pixel(const Tensor<uint8_t>& region, int h, int w) {
  std::vector<int> dist(static_cast<size_t>(h * w), -1);
  std::deque<int64_t> queue;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int64_t i = static_cast<int64_t>(y) * w + x;
      if (!region[i]) continue;
      bool boundary = y == 0 || x == 0 || y == h - 1 || x == w - 1;
      if (!boundary) {
        boundary = !region[i - 1] || !region[i + 1] || !region[i - w] || !region[i + w];
      }
      if (boundary) {
        dist[static_cast<size_t>(i)] = 0;
        queue.push_back(i);
      }
    }
  }
  int64_t best = queue.empty() ? -1 : queue.front();
  while (!queue.empty()) {
    const int64_t cur = queue.front();
    queue.pop_front();
    if (dist[static_cast<size_t>(cur)] > dist[static_cast<size_t>(best)]) best = cur;
    const int y = static_cast<int>(cur / w), x = static_cast<int>(cur % w);
    const int ny[4] = {y - 1, y + 1, y, y}, nx[4] = {x, x, x - 1, x + 1};
    for (int k = 0; k < 4; ++k) {
      if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
      const int64_t j = static_cast<int64_t>(ny[k]) * w + nx[k];
      if (region[j] && dist[static_cast<size_t>(j)] < 0) {
        dist[static_cast<size_t>(j)] = dist[static_cast<size_t>(cur)] + 1;
        queue.push_back(j);
      }
    }
  }
  return best;
}

// Chord along the major axis through the centroid, kept to pixels whose four
// neighbours are inside the region and trimmed to 80% of its reach. Thinning a
// convex blob collapses to a point or a stub; this restores a stroke across it.
std::vector<int64_t> principal_stroke(const Tensor<uint8_t>& region, int h, int w) {
  double n = 0, my = 0, mx = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (region[static_cast<int64_t>(y) * w + x]) n += 1, my += y, mx += x;
    }
  }
  if (n == 0) return {};
  my /= n, mx /= n;
  double syy = 0, sxx = 0, sxy = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!region[static_cast<int64_t>(y) * w + x]) continue;
      syy += (y - my) * (y - my), sxx += (x - mx) * (x - mx), sxy += (y - my) * (x - mx);
    }
  }
  const double theta = 0.5 * std::atan2(2.0 * sxy, sxx - syy);
  const double dy = std::sin(theta), dx = std::cos(theta);
  auto interior = [&](double fy, double fx) -> int64_t {
    const int y = static_cast<int>(std::lround(fy)), x = static_cast<int>(std::lround(fx));
    if (y < 1 || y >= h - 1 || x < 1 || x >= w - 1) return -1;
    const int64_t i = static_cast<int64_t>(y) * w + x;
    if (!region[i] || !region[i - 1] || !region[i + 1] || !region[i - w] || !region[i + w]) return -1;
    return i;
  };
  // Reach in each direction while staying interior.
  double reach[2] = {0.0, 0.0};
  for (int side = 0; side < 2; ++side) {
    const double sgn = side == 0 ? 1.0 : -1.0;
    for (double t = 0.5;; t += 0.5) {
      if (interior(my + sgn * t * dy, mx + sgn * t * dx) < 0) break;
      reach[side] = t;
    }
  }
  std::vector<int64_t> out;
  for (double t = -0.8 * reach[1]; t <= 0.8 * reach[0] + 1e-9; t += 0.5) {
    const int64_t i = interior(my + t * dy, mx + t * dx);
    if (i >= 0 && (out.empty() || out.back() != i)) out.push_back(i);
  }
  return out;
}

}  // namespace

Tensor<uint8_t> synthesize_scribbles(const Tensor<uint8_t>& dense_mask, int num_classes, Rng& rng,
                                     double max_fraction) {
  if (dense_mask.rank() != 2) throw InputError("synthesize_scribbles: mask must be H×W");
  const int h = static_cast<int>(dense_mask.dim(0)), w = static_cast<int>(dense_mask.dim(1));
  for (uint8_t v : dense_mask.values()) {
    if (v >= num_classes) throw InputError("synthesize_scribbles: mask label out of range");
  }
  Tensor<uint8_t> scribble({h, w}, kIgnore);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<int64_t>> strokes(static_cast<size_t>(num_classes));

  for (int c = 0; c < num_classes; ++c) {
    Tensor<uint8_t> region({h, w}, 0);
    int64_t area = 0;
    for (int64_t i = 0; i < region.size(); ++i) {
      if (dense_mask[i] == c) {
        region[i] = 1;
        ++area;
      }
    }
    if (area == 0) continue;
    const Tensor<uint8_t> skel = skeletonize(region);
    std::vector<int64_t> order = trace_order(skel, h, w);
    if (static_cast<double>(order.size()) < 0.5 * std::sqrt(static_cast<double>(area))) {
      if (auto chord = principal_stroke(region, h, w); chord.size() > order.size()) order = std::move(chord);
    }

    // Random-walk offset carried along the stroke.
    int oy = 0, ox = 0;
    auto& stroke = strokes[static_cast<size_t>(c)];
    for (int64_t idx : order) {
      if (unit(rng) < 0.3) {
        const int step = unit(rng) < 0.5 ? -1 : 1;
        if (unit(rng) < 0.5) {
          oy = std::clamp(oy + step, -2, 2);
        } else {
          ox = std::clamp(ox + step, -2, 2);
        }
      }
      const int y = static_cast<int>(idx / w) + oy, x = static_cast<int>(idx % w) + ox;
      int64_t target = idx;
      if (y >= 0 && y < h && x >= 0 && x < w && region[static_cast<int64_t>(y) * w + x]) {
        target = static_cast<int64_t>(y) * w + x;
      }
      if (scribble[target] == kIgnore) {
        scribble[target] = static_cast<uint8_t>(c);
        stroke.push_back(target);
      }
    }
    if (stroke.empty() && area >= 1) {
      const int64_t deep = deepest_pixel(region, h, w);
      scribble[deep] = static_cast<uint8_t>(c);
      stroke.push_back(deep);
    }
  }

  // Enforce the coverage cap by trimming the tail of the longest stroke.
  const int64_t cap = std::max<int64_t>(
      1, static_cast<int64_t>(std::floor(max_fraction * static_cast<double>(h) * w)));
  int64_t labeled = 0;
  for (const auto& s : strokes) labeled += static_cast<int64_t>(s.size());
  while (labeled > cap) {
    auto longest = std::max_element(strokes.begin(), strokes.end(),
                                     [](const auto& a, const auto& b) { return a.size() < b.size(); });
    if (longest->size() <= 1) break;
    scribble[longest->back()] = kIgnore;
    longest->pop_back();
    --labeled;
  }
  return scribble;
}

int64_t count_labeled(const Tensor<uint8_t>& scribble) {
  return std::count_if(scribble.values().begin(), scribble.values().end(),
                       [](uint8_t v) { return v != kIgnore; });
}

// ---------------------------------------------------------------------------
// Augmentation

SpatialTransform draw_transform(Rng& rng, const AugmentOptions& options) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SpatialTransform t;
  // Draw every variate unconditionally so the stream position does not depend
  // on the options.
  const int turns = static_cast<int>(unit(rng) * 4.0) % 4;
  const bool fh = unit(rng) < 0.5;
  const bool fv = unit(rng) < 0.5;
  const double p_rot = unit(rng);
  const double angle = (2.0 * unit(rng) - 1.0) * options.max_rotation_deg;
  if (options.right_angle_rotation) t.quarter_turns = turns;
  if (options.flips) {
    t.flip_horizontal = fh;
    t.flip_vertical = fv;
  }
  if (p_rot < options.continuous_rotation_prob) t.angle_deg = angle;
  return t;
}

std::vector<int64_t> pixel_permutation(int height, int width, const SpatialTransform& transform) {
  const int turns = ((transform.quarter_turns % 4) + 4) % 4;
  if (turns % 2 == 1 && height != width) {
    throw InputError("quarter-turn rotation requires a square plane");
  }
  std::vector<int64_t> src(static_cast<size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      // Walk the inverse transform from destination back to source.
      int sy = y, sx = x;
      if (transform.flip_vertical) sy = height - 1 - sy;
      if (transform.flip_horizontal) sx = width - 1 - sx;
      for (int k = 0; k < turns; ++k) {
        // Counter-clockwise turn: out[y][x] = in[x][W-1-y].
        const int ny = sx, nx = width - 1 - sy;
        sy = ny;
        sx = nx;
      }
      src[static_cast<size_t>(y) * width + x] = static_cast<int64_t>(sy) * width + sx;
    }
  }
  return src;
}

PhantomSample apply_transform(const PhantomSample& sample, const SpatialTransform& transform) {
  const int h = sample.height(), w = sample.width();
  const std::vector<int64_t> perm = pixel_permutation(h, w, transform);
  PhantomSample out;
  out.id = sample.id;
  out.image = TensorF({h, w});
  out.mask = Tensor<uint8_t>({h, w});
  out.scribble = Tensor<uint8_t>({h, w});
  for (size_t i = 0; i < perm.size(); ++i) {
    out.image[static_cast<int64_t>(i)] = sample.image[perm[i]];
    out.mask[static_cast<int64_t>(i)] = sample.mask[perm[i]];
    out.scribble[static_cast<int64_t>(i)] = sample.scribble[perm[i]];
  }
  if (transform.angle_deg == 0.0) return out;

  // Continuous rotation about the plane centre.
  const double theta = transform.angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  PhantomSample rot;
  rot.id = out.id;
  rot.image = TensorF({h, w}, 0.0f);
  rot.mask = Tensor<uint8_t>({h, w}, kBackground);
  rot.scribble = Tensor<uint8_t>({h, w}, kIgnore);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double dy = y - cy, dx = x - cx;
      const double sy = c * dy - s * dx + cy;
      const double sx = s * dy + c * dx + cx;
      const int64_t di = static_cast<int64_t>(y) * w + x;
      const int ny = static_cast<int>(std::lround(sy)), nx = static_cast<int>(std::lround(sx));
      if (ny >= 0 && ny < h && nx >= 0 && nx < w) {
        rot.mask[di] = out.mask[static_cast<int64_t>(ny) * w + nx];
        rot.scribble[di] = out.scribble[static_cast<int64_t>(ny) * w + nx];
      }
      const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      const double fy = sy - y0, fx = sx - x0;
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) {
        const int yy = y0 + (k >> 1), xx = x0 + (k & 1);
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        const double wgt = ((k >> 1) ? fy : 1.0 - fy) * ((k & 1) ? fx : 1.0 - fx);
        acc += wgt * out.image[static_cast<int64_t>(yy) * w + xx];
      }
      rot.image[di] = static_cast<float>(acc);
    }
  }
  return rot;
}

PhantomSample augment(const PhantomSample& sample, Rng& rng, const AugmentOptions& options) {
  return apply_transform(sample, draw_transform(rng, options));
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

template <typename T>
void write_raw(const fs::path& path, const std::vector<T>& values) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    f.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(T)));
  } else {
    for (T v : values) {
      auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      f.write(bytes.data(), sizeof(T));
    }
  }
  if (!f) throw IoError("write failed: " + path.string());
}

template <typename T>
std::vector<T> read_raw(const fs::path& path, int64_t expected_count) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("missing file: " + path.string());
  f.seekg(0, std::ios::end);
  const auto bytes = static_cast<int64_t>(f.tellg());
  if (bytes != expected_count * static_cast<int64_t>(sizeof(T))) {
    throw IoError("shape mismatch: " + path.string() + " holds " + std::to_string(bytes) +
                  " bytes, manifest implies " +
                  std::to_string(expected_count * static_cast<int64_t>(sizeof(T))));
  }
  f.seekg(0);
  std::vector<T> values(static_cast<size_t>(expected_count));
  f.read(reinterpret_cast<char*>(values.data()), bytes);
  if constexpr (std::endian::native != std::endian::little && sizeof(T) > 1) {
    for (auto& v : values) {
      auto b = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(b.begin(), b.end());
      v = std::bit_cast<T>(b);
    }
  }
  return values;
}

}  // namespace

void save_dataset(const fs::path& dir, const Dataset& dataset) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const DatasetSpec& spec = dataset.spec;
  json manifest;
  manifest["format_version"] = kDatasetFormatVersion;
  manifest["num_classes"] = spec.num_classes;
  manifest["height"] = spec.image_size;
  manifest["width"] = spec.image_size;
  manifest["seed"] = spec.seed;
  manifest["ignore_label"] = kIgnore;
  manifest["max_scribble_fraction"] = spec.max_scribble_fraction;
  manifest["dtypes"] = {{"image", "float32_le"}, {"mask", "uint8"}, {"scribble", "uint8"}};
  json splits = json::object();
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    json ids = json::array();
    for (const auto& sample : dataset.split(s)) {
      if (sample.height() != spec.image_size || sample.width() != spec.image_size) {
        throw InputError("sample " + sample.id + " does not match dataset image size");
      }
      ids.push_back(sample.id);
      write_raw(dir / (sample.id + ".img.f32"), sample.image.values());
      write_raw(dir / (sample.id + ".mask.u8"), sample.mask.values());
      write_raw(dir / (sample.id + ".scrib.u8"), sample.scribble.values());
    }
    splits[split_name(s)] = std::move(ids);
  }
  manifest["splits"] = std::move(splits);
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  if (!f) throw IoError("cannot write manifest in " + dir.string());
  f << manifest.dump(2) << "\n";
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream f(manifest_path);
  if (!f) throw IoError("missing manifest: " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(f);
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  try {
    const int version = manifest.at("format_version").get<int>();
    if (version != kDatasetFormatVersion) {
      throw IoError("unknown dataset format version " + std::to_string(version));
    }
    Dataset ds;
    ds.spec.num_classes = manifest.at("num_classes").get<int>();
    const int h = manifest.at("height").get<int>();
    const int w = manifest.at("width").get<int>();
    if (h != w) throw IoError("non-square datasets are not supported");
    ds.spec.image_size = h;
    ds.spec.seed = manifest.value("seed", uint64_t{0});
    ds.spec.max_scribble_fraction = manifest.value("max_scribble_fraction", 0.2);
    const auto& dtypes = manifest.at("dtypes");
    if (dtypes.at("image") != "float32_le" || dtypes.at("mask") != "uint8" ||
        dtypes.at("scribble") != "uint8") {
      throw IoError("unsupported dtype codes in manifest");
    }
    const int64_t pixels = static_cast<int64_t>(h) * w;
    for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
      auto& out = ds.split(s);
      for (const auto& id_json : manifest.at("splits").at(split_name(s))) {
        PhantomSample sample;
        sample.id = id_json.get<std::string>();
        sample.image = TensorF({h, w}, read_raw<float>(dir / (sample.id + ".img.f32"), pixels));
        sample.mask =
            Tensor<uint8_t>({h, w}, read_raw<uint8_t>(dir / (sample.id + ".mask.u8"), pixels));
        sample.scribble =
            Tensor<uint8_t>({h, w}, read_raw<uint8_t>(dir / (sample.id + ".scrib.u8"), pixels));
        out.push_back(std::move(sample));
      }
    }
    ds.spec.n_train = static_cast<int>(ds.train.size());
    ds.spec.n_val = static_cast<int>(ds.val.size());
    ds.spec.n_test = static_cast<int>(ds.test.size());
    ds.spec.validate();
    return ds;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw IoError("invalid manifest " + manifest_path.string() + ": " + e.what());
  }
}

uint64_t dataset_fingerprint(const Dataset& dataset) {
  uint64_t hash = 1469598103934665603ULL;
  auto feed = [&](const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      hash ^= p[i];
      hash *= 1099511628211ULL;
    }
  };
  feed(&dataset.spec.num_classes, sizeof(int));
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    for (const auto& sample : dataset.split(s)) {
      feed(sample.id.data(), sample.id.size());
      feed(sample.image.data(), static_cast<size_t>(sample.image.size()) * sizeof(float));
      feed(sample.mask.data(), static_cast<size_t>(sample.mask.size()));
      feed(sample.scribble.data(), static_cast<size_t>(sample.scribble.size()));
    }
  }
  return hash;
}

}  // namespace sdtlab
