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

#include "sdtlab/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <random>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <Eigen/Core>

#include "sdtlab/random.hpp"

namespace sdtlab {

// ---------------------------------------------------------------------------
// Configuration and parameter containers

void BackboneConfig::validate() const {
  if (widths.size() != 5) {
    throw ConfigError("backbone needs exactly 5 encoder widths, got " +
                      std::to_string(widths.size()));
  }
  for (int w : widths) {
    if (w <= 0) throw ConfigError("encoder widths must be positive");
  }
  if (in_channels <= 0) throw ConfigError("in_channels must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (norm_groups <= 0) throw ConfigError("norm_groups must be positive");
}

uint64_t architecture_fingerprint(const BackboneConfig& config,
                                  const std::vector<ParamTensor>& params) {
  uint64_t h = mix64(0x5D7u);
  auto feed = [&](uint64_t v) { h = mix64(h ^ v); };
  feed(static_cast<uint64_t>(config.in_channels));
  feed(static_cast<uint64_t>(config.num_classes));
  feed(static_cast<uint64_t>(config.norm_groups));
  for (int w : config.widths) feed(static_cast<uint64_t>(w));
  for (const auto& p : params) {
    for (char ch : p.name) feed(static_cast<unsigned char>(ch));
    feed(p.shape.size());
    for (int64_t d : p.shape) feed(static_cast<uint64_t>(d));
  }
  return h;
}

NetworkWeights::NetworkWeights(BackboneConfig config, std::vector<ParamTensor> params)
    : config_(std::move(config)), params_(std::move(params)) {
  for (const auto& p : params_) {
    if (static_cast<int64_t>(p.values.size()) != num_elements(p.shape)) {
      throw InputError("parameter " + p.name + " has " + std::to_string(p.values.size()) +
                       " values for shape " + shape_to_string(p.shape));
    }
  }
  fingerprint_ = architecture_fingerprint(config_, params_);
}

const ParamTensor& NetworkWeights::param(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw InputError("no parameter named '" + std::string(name) + "'");
}

ParamTensor& NetworkWeights::param(std::string_view name) {
  return const_cast<ParamTensor&>(std::as_const(*this).param(name));
}

int64_t NetworkWeights::num_parameters() const {
  int64_t n = 0;
  for (const auto& p : params_) n += static_cast<int64_t>(p.values.size());
  return n;
}

NetworkWeights zeros_like(const NetworkWeights& w) {
  std::vector<ParamTensor> params = w.params();
  for (auto& p : params) std::fill(p.values.begin(), p.values.end(), 0.0);
  return NetworkWeights(w.config(), std::move(params));
}

NetworkWeights copy_weights(const NetworkWeights& src) { return src; }

namespace {

int groups_for(int channels, int requested) {
  int g = std::min(requested, channels);
  while (channels % g != 0) --g;
  return g;
}

std::string enc_name(int level) { return "enc" + std::to_string(level); }
std::string dec_name(int level) { return "dec" + std::to_string(level); }

void add_block_params(std::vector<ParamTensor>& out, const std::string& prefix, int cin, int cout) {
  out.push_back({prefix + ".conv1.weight", {cout, cin, 3, 3}, {}});
  out.push_back({prefix + ".norm1.weight", {cout}, {}});
  out.push_back({prefix + ".norm1.bias", {cout}, {}});
  out.push_back({prefix + ".conv2.weight", {cout, cout, 3, 3}, {}});
  out.push_back({prefix + ".norm2.weight", {cout}, {}});
  out.push_back({prefix + ".norm2.bias", {cout}, {}});
}

}  // namespace

NetworkWeights build(const BackboneConfig& config, uint64_t seed) {
  config.validate();
  const auto& wd = config.widths;
  const int levels = config.levels();
  std::vector<ParamTensor> params;
  for (int l = 0; l < levels; ++l) {
    add_block_params(params, enc_name(l), l == 0 ? config.in_channels : wd[l - 1], wd[l]);
  }
  for (int l = levels - 2; l >= 0; --l) {
    params.push_back({dec_name(l) + ".up.weight", {wd[l + 1], wd[l], 2, 2}, {}});
    params.push_back({dec_name(l) + ".up.bias", {wd[l]}, {}});
    add_block_params(params, dec_name(l), 2 * wd[l], wd[l]);
  }
  params.push_back({"head.weight", {config.num_classes, wd[0], 1, 1}, {}});
  params.push_back({"head.bias", {config.num_classes}, {}});

  Rng rng = make_rng(seed, Stream::kInit);
  for (auto& p : params) {
    p.values.assign(static_cast<size_t>(num_elements(p.shape)), 0.0);
    const bool is_norm_gain = p.name.find(".norm") != std::string::npos &&
                              p.name.ends_with(".weight");
    if (is_norm_gain) {
      std::fill(p.values.begin(), p.values.end(), 1.0);
    } else if (p.name.ends_with(".weight")) {
      // He-normal on fan-in; the transposed convolution's fan-in is its input
      // channel count.
      double fan_in = 0.0;
      if (p.name.find(".up.") != std::string::npos) {
        fan_in = static_cast<double>(p.shape[0]);
      } else {
        fan_in = static_cast<double>(p.shape[1] * p.shape[2] * p.shape[3]);
      }
      const double gain = p.name == "head.weight" ? 1.0 : 2.0;
      std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
      for (auto& v : p.values) v = dist(rng);
    }
  }
  return NetworkWeights(config, std::move(params));
}

// ---------------------------------------------------------------------------
// Compute engine. Activations are stored channel-major (C×N×H×W) so every
// convolution over a whole batch is a single matrix product.

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
struct Act {
  int c = 0, n = 0, h = 0, w = 0;
  std::vector<T> v;

  Act() = default;
  Act(int c_, int n_, int h_, int w_)
      : c(c_), n(n_), h(h_), w(w_), v(static_cast<size_t>(c_) * n_ * h_ * w_, T(0)) {}

  int64_t cols() const { return static_cast<int64_t>(n) * h * w; }
  int64_t hw() const { return static_cast<int64_t>(h) * w; }
  MatMap<T> mat() { return MatMap<T>(v.data(), c, cols()); }
  ConstMatMap<T> mat() const { return ConstMatMap<T>(v.data(), c, cols()); }
  T* plane(int ci, int ni) { return v.data() + ci * cols() + ni * hw(); }
  const T* plane(int ci, int ni) const { return v.data() + ci * cols() + ni * hw(); }
};

template <typename T>
struct NormParams {
  std::vector<T> gamma, beta;
  int groups = 1;
};

template <typename T>
struct BlockParams {
  RowMat<T> conv1, conv2;  // Cout × (Cin·9)
  NormParams<T> norm1, norm2;
};

template <typename T>
struct UpParams {
  RowMat<T> wt;  // (Cout·4) × Cin
  std::vector<T> bias;
};

template <typename T>
struct EngineParams {
  std::vector<BlockParams<T>> enc;
  std::vector<UpParams<T>> up;  // up[l]: level l+1 → l
  std::vector<BlockParams<T>> dec;
  RowMat<T> head_w;  // K × C0
  std::vector<T> head_b;
};

template <typename T>
std::vector<T> cast_values(const ParamTensor& p) {
  return std::vector<T>(p.values.begin(), p.values.end());
}

template <typename T>
RowMat<T> cast_matrix(const ParamTensor& p, int64_t rows, int64_t cols) {
  RowMat<T> m(rows, cols);
  for (int64_t i = 0; i < rows * cols; ++i) m.data()[i] = static_cast<T>(p.values[static_cast<size_t>(i)]);
  return m;
}

template <typename T>
BlockParams<T> load_block(const NetworkWeights& w, const std::string& prefix, int groups) {
  BlockParams<T> b;
  const auto& c1 = w.param(prefix + ".conv1.weight");
  const auto& c2 = w.param(prefix + ".conv2.weight");
  b.conv1 = cast_matrix<T>(c1, c1.shape[0], c1.shape[1] * 9);
  b.conv2 = cast_matrix<T>(c2, c2.shape[0], c2.shape[1] * 9);
  const int cout = static_cast<int>(c1.shape[0]);
  b.norm1 = {cast_values<T>(w.param(prefix + ".norm1.weight")),
             cast_values<T>(w.param(prefix + ".norm1.bias")), groups_for(cout, groups)};
  b.norm2 = {cast_values<T>(w.param(prefix + ".norm2.weight")),
             cast_values<T>(w.param(prefix + ".norm2.bias")), groups_for(cout, groups)};
  return b;
}

template <typename T>
EngineParams<T> load_params(const NetworkWeights& w) {
  const BackboneConfig& cfg = w.config();
  const int levels = cfg.levels();
  EngineParams<T> e;
  for (int l = 0; l < levels; ++l) e.enc.push_back(load_block<T>(w, enc_name(l), cfg.norm_groups));
  e.up.resize(static_cast<size_t>(levels - 1));
  e.dec.resize(static_cast<size_t>(levels - 1));
  for (int l = 0; l < levels - 1; ++l) {
    const auto& up = w.param(dec_name(l) + ".up.weight");
    const int cin = static_cast<int>(up.shape[0]), cout = static_cast<int>(up.shape[1]);
    RowMat<T> wt(cout * 4, cin);
    for (int ci = 0; ci < cin; ++ci) {
      for (int co = 0; co < cout; ++co) {
        for (int k = 0; k < 4; ++k) {
          wt(co * 4 + k, ci) = static_cast<T>(up.values[static_cast<size_t>((ci * cout + co) * 4 + k)]);
        }
      }
    }
    e.up[static_cast<size_t>(l)] = {std::move(wt), cast_values<T>(w.param(dec_name(l) + ".up.bias"))};
    e.dec[static_cast<size_t>(l)] = load_block<T>(w, dec_name(l), cfg.norm_groups);
  }
  const auto& hw = w.param("head.weight");
  e.head_w = cast_matrix<T>(hw, hw.shape[0], hw.shape[1]);
  e.head_b = cast_values<T>(w.param("head.bias"));
  return e;
}

// --- 3×3 convolution, padding 1 -------------------------------------------

template <typename T>
void im2col3x3(const Act<T>& in, RowMat<T>& col) {
  const int64_t cols = in.cols();
  col.resize(static_cast<int64_t>(in.c) * 9, cols);
  const int w = in.w;
  for (int ci = 0; ci < in.c; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* dst = col.data() + (ci * 9 + ky * 3 + kx) * cols;
        // Valid destination x range for this horizontal tap.
        const int x0 = kx == 0 ? 1 : 0, x1 = kx == 2 ? w - 1 : w;
        for (int ni = 0; ni < in.n; ++ni) {
          const T* src = in.plane(ci, ni);
          for (int y = 0; y < in.h; ++y) {
            T* row = dst + (static_cast<int64_t>(ni) * in.h + y) * w;
            const int yy = y + ky - 1;
            if (yy < 0 || yy >= in.h) {
              std::fill(row, row + w, T(0));
              continue;
            }
            const T* srow = src + static_cast<int64_t>(yy) * w + (kx - 1);
            if (x0 > 0) row[0] = T(0);
            if (x1 < w) row[w - 1] = T(0);
            std::copy(srow + x0, srow + x1, row + x0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im3x3(const RowMat<T>& col, Act<T>& out) {
  std::fill(out.v.begin(), out.v.end(), T(0));
  const int64_t cols = out.cols();
  const int w = out.w;
  for (int ci = 0; ci < out.c; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* src = col.data() + (ci * 9 + ky * 3 + kx) * cols;
        const int x0 = kx == 0 ? 1 : 0, x1 = kx == 2 ? w - 1 : w;
        for (int ni = 0; ni < out.n; ++ni) {
          T* dst = out.plane(ci, ni);
          for (int y = 0; y < out.h; ++y) {
            const int yy = y + ky - 1;
            if (yy < 0 || yy >= out.h) continue;
            const T* row = src + (static_cast<int64_t>(ni) * out.h + y) * w;
            T* drow = dst + static_cast<int64_t>(yy) * w + (kx - 1);
            for (int x = x0; x < x1; ++x) drow[x] += row[x];
          }
        }
      }
    }
  }
}

// --- group normalization fused with ReLU ----------------------------------

constexpr double kNormEps = 1e-5;

template <typename T>
void norm_relu_forward(const Act<T>& z, const NormParams<T>& p, Act<T>& out, Act<T>* xhat,
                       std::vector<T>* inv_std) {
  out = Act<T>(z.c, z.n, z.h, z.w);
  if (xhat) *xhat = Act<T>(z.c, z.n, z.h, z.w);
  if (inv_std) inv_std->assign(static_cast<size_t>(z.n) * p.groups, T(0));
  const int cpg = z.c / p.groups;
  const int64_t hw = z.hw();
  const double count = static_cast<double>(cpg) * static_cast<double>(hw);
  for (int ni = 0; ni < z.n; ++ni) {
    for (int g = 0; g < p.groups; ++g) {
      double sum = 0.0;
      for (int ci = g * cpg; ci < (g + 1) * cpg; ++ci) {
        const T* src = z.plane(ci, ni);
        for (int64_t i = 0; i < hw; ++i) sum += src[i];
      }
      const double mean = sum / count;
      double sq = 0.0;
      for (int ci = g * cpg; ci < (g + 1) * cpg; ++ci) {
        const T* src = z.plane(ci, ni);
        for (int64_t i = 0; i < hw; ++i) {
          const double d = src[i] - mean;
          sq += d * d;
        }
      }
      const T istd = static_cast<T>(1.0 / std::sqrt(sq / count + kNormEps));
      const T m = static_cast<T>(mean);
      if (inv_std) (*inv_std)[static_cast<size_t>(ni * p.groups + g)] = istd;
      for (int ci = g * cpg; ci < (g + 1) * cpg; ++ci) {
        const T* src = z.plane(ci, ni);
        T* dst = out.plane(ci, ni);
        T* xh = xhat ? xhat->plane(ci, ni) : nullptr;
        const T gamma = p.gamma[static_cast<size_t>(ci)], beta = p.beta[static_cast<size_t>(ci)];
        for (int64_t i = 0; i < hw; ++i) {
          const T x = (src[i] - m) * istd;
          if (xh) xh[i] = x;
          const T y = gamma * x + beta;
          dst[i] = y < T(0) ? T(0) : y;  // NaN passes through
        }
      }
    }
  }
}

// d_out is consumed; returns the gradient w.r.t. the pre-normalization input.
template <typename T>
Act<T> norm_relu_backward(const Act<T>& xhat, const std::vector<T>& inv_std, const Act<T>& out,
                          const NormParams<T>& p, Act<T> d_out, std::vector<double>& d_gamma,
                          std::vector<double>& d_beta) {
  const int cpg = xhat.c / p.groups;
  const int64_t hw = xhat.hw();
  const double count = static_cast<double>(cpg) * static_cast<double>(hw);
  d_gamma.assign(static_cast<size_t>(xhat.c), 0.0);
  d_beta.assign(static_cast<size_t>(xhat.c), 0.0);
  Act<T> d_in(xhat.c, xhat.n, xhat.h, xhat.w);
  for (int ni = 0; ni < xhat.n; ++ni) {
    for (int g = 0; g < p.groups; ++g) {
      double s1 = 0.0, s2 = 0.0;
      for (int ci = g * cpg; ci < (g + 1) * cpg; ++ci) {
        T* dy = d_out.plane(ci, ni);
        const T* y = out.plane(ci, ni);
        const T* xh = xhat.plane(ci, ni);
        const T gamma = p.gamma[static_cast<size_t>(ci)];
        double dg = 0.0, db = 0.0;
        for (int64_t i = 0; i < hw; ++i) {
          const T d = y[i] > T(0) ? dy[i] : T(0);
          dg += static_cast<double>(d) * xh[i];
          db += d;
          dy[i] = d * gamma;  // now d xhat
          s1 += dy[i];
          s2 += static_cast<double>(dy[i]) * xh[i];
        }
        d_gamma[static_cast<size_t>(ci)] += dg;
        d_beta[static_cast<size_t>(ci)] += db;
      }
      const T istd = inv_std[static_cast<size_t>(ni * p.groups + g)];
      const T a = static_cast<T>(s1 / count), b = static_cast<T>(s2 / count);
      for (int ci = g * cpg; ci < (g + 1) * cpg; ++ci) {
        const T* dxh = d_out.plane(ci, ni);
        const T* xh = xhat.plane(ci, ni);
        T* dst = d_in.plane(ci, ni);
        for (int64_t i = 0; i < hw; ++i) dst[i] = istd * (dxh[i] - a - xh[i] * b);
      }
    }
  }
  return d_in;
}

// --- conv block: conv3x3 → GN → ReLU → conv3x3 → GN → ReLU ----------------

template <typename T>
struct BlockCache {
  Act<T> in, xhat1, a1, xhat2, out;
  std::vector<T> istd1, istd2;
};

template <typename T>
struct BlockGrads {
  RowMat<T> conv1, conv2;
  std::vector<double> g1, b1, g2, b2;
};

template <typename T>
Act<T> block_forward(const BlockParams<T>& p, const Act<T>& in, BlockCache<T>* cache) {
  RowMat<T> col;
  im2col3x3(in, col);
  Act<T> z1(static_cast<int>(p.conv1.rows()), in.n, in.h, in.w);
  z1.mat().noalias() = p.conv1 * col;
  Act<T> a1;
  norm_relu_forward(z1, p.norm1, a1, cache ? &cache->xhat1 : nullptr,
                    cache ? &cache->istd1 : nullptr);
  z1 = Act<T>();
  im2col3x3(a1, col);
  Act<T> z2(static_cast<int>(p.conv2.rows()), in.n, in.h, in.w);
  z2.mat().noalias() = p.conv2 * col;
  Act<T> out;
  norm_relu_forward(z2, p.norm2, out, cache ? &cache->xhat2 : nullptr,
                    cache ? &cache->istd2 : nullptr);
  if (cache) {
    cache->in = in;
    cache->a1 = std::move(a1);
    cache->out = out;
  }
  return out;
}

template <typename T>
Act<T> block_backward(const BlockParams<T>& p, const BlockCache<T>& c, Act<T> d_out,
                      BlockGrads<T>& g) {
  Act<T> dz2 = norm_relu_backward(c.xhat2, c.istd2, c.out, p.norm2, std::move(d_out), g.g2, g.b2);
  RowMat<T> col;
  im2col3x3(c.a1, col);
  g.conv2.noalias() = dz2.mat() * col.transpose();
  RowMat<T> dcol = p.conv2.transpose() * dz2.mat();
  Act<T> da1(c.a1.c, c.a1.n, c.a1.h, c.a1.w);
  col2im3x3(dcol, da1);
  Act<T> dz1 = norm_relu_backward(c.xhat1, c.istd1, c.a1, p.norm1, std::move(da1), g.g1, g.b1);
  im2col3x3(c.in, col);
  g.conv1.noalias() = dz1.mat() * col.transpose();
  dcol.noalias() = p.conv1.transpose() * dz1.mat();
  Act<T> din(c.in.c, c.in.n, c.in.h, c.in.w);
  col2im3x3(dcol, din);
  return din;
}

// --- 2×2 max pooling -------------------------------------------------------

template <typename T>
Act<T> maxpool_forward(const Act<T>& in, std::vector<uint8_t>* argmax) {
  Act<T> out(in.c, in.n, in.h / 2, in.w / 2);
  if (argmax) argmax->assign(out.v.size(), 0);
  int64_t o = 0;
  for (int ci = 0; ci < in.c; ++ci) {
    for (int ni = 0; ni < in.n; ++ni) {
      const T* src = in.plane(ci, ni);
      for (int y = 0; y < out.h; ++y) {
        for (int x = 0; x < out.w; ++x, ++o) {
          uint8_t best = 0;
          T m = src[(2 * y) * in.w + 2 * x];
          for (uint8_t k = 1; k < 4; ++k) {
            const T v = src[(2 * y + (k >> 1)) * in.w + 2 * x + (k & 1)];
            if (v > m) {
              m = v;
              best = k;
            }
          }
          out.v[static_cast<size_t>(o)] = m;
          if (argmax) (*argmax)[static_cast<size_t>(o)] = best;
        }
      }
    }
  }
  return out;
}

template <typename T>
void maxpool_backward(const Act<T>& d_out, const std::vector<uint8_t>& argmax, Act<T>& d_in) {
  int64_t o = 0;
  for (int ci = 0; ci < d_in.c; ++ci) {
    for (int ni = 0; ni < d_in.n; ++ni) {
      T* dst = d_in.plane(ci, ni);
      for (int y = 0; y < d_out.h; ++y) {
        for (int x = 0; x < d_out.w; ++x, ++o) {
          const uint8_t k = argmax[static_cast<size_t>(o)];
          dst[(2 * y + (k >> 1)) * d_in.w + 2 * x + (k & 1)] += d_out.v[static_cast<size_t>(o)];
        }
      }
    }
  }
}

// --- 2×2 stride-2 transposed convolution -----------------------------------

template <typename T>
Act<T> upconv_forward(const UpParams<T>& p, const Act<T>& in) {
  const int cout = static_cast<int>(p.wt.rows() / 4);
  RowMat<T> tmp = p.wt * in.mat();
  Act<T> out(cout, in.n, in.h * 2, in.w * 2);
  for (int co = 0; co < cout; ++co) {
    const T b = p.bias[static_cast<size_t>(co)];
    for (int k = 0; k < 4; ++k) {
      const T* src = tmp.data() + (co * 4 + k) * in.cols();
      const int dy = k >> 1, dx = k & 1;
      for (int ni = 0; ni < in.n; ++ni) {
        T* dst = out.plane(co, ni);
        for (int y = 0; y < in.h; ++y) {
          for (int x = 0; x < in.w; ++x) {
            dst[(2 * y + dy) * out.w + 2 * x + dx] = src[(ni * in.h + y) * in.w + x] + b;
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
Act<T> upconv_backward(const UpParams<T>& p, const Act<T>& in, const Act<T>& d_out, RowMat<T>& d_wt,
                       std::vector<double>& d_bias) {
  const int cout = d_out.c;
  RowMat<T> dtmp(cout * 4, in.cols());
  d_bias.assign(static_cast<size_t>(cout), 0.0);
  for (int co = 0; co < cout; ++co) {
    double db = 0.0;
    for (int k = 0; k < 4; ++k) {
      T* dst = dtmp.data() + (co * 4 + k) * in.cols();
      const int dy = k >> 1, dx = k & 1;
      for (int ni = 0; ni < in.n; ++ni) {
        const T* src = d_out.plane(co, ni);
        for (int y = 0; y < in.h; ++y) {
          for (int x = 0; x < in.w; ++x) {
            const T v = src[(2 * y + dy) * d_out.w + 2 * x + dx];
            dst[(ni * in.h + y) * in.w + x] = v;
            db += v;
          }
        }
      }
    }
    d_bias[static_cast<size_t>(co)] = db;
  }
  d_wt.noalias() = dtmp * in.mat().transpose();
  Act<T> d_in(in.c, in.n, in.h, in.w);
  d_in.mat().noalias() = p.wt.transpose() * dtmp;
  return d_in;
}

// --- whole network ---------------------------------------------------------

template <typename T>
Act<T> concat_channels(const Act<T>& a, const Act<T>& b) {
  Act<T> out;
  out.c = a.c + b.c;
  out.n = a.n;
  out.h = a.h;
  out.w = a.w;
  out.v.reserve(a.v.size() + b.v.size());
  out.v.insert(out.v.end(), a.v.begin(), a.v.end());
  out.v.insert(out.v.end(), b.v.begin(), b.v.end());
  return out;
}

template <typename T>
struct NetCache {
  std::vector<BlockCache<T>> enc, dec;
  std::vector<std::vector<uint8_t>> pool_arg;
};

template <typename T>
Act<T> images_to_act(const TensorF& images, const BackboneConfig& cfg) {
  if (images.rank() != 4) {
    throw InputError("forward: images must be N×C×H×W, got " + shape_to_string(images.shape()));
  }
  const int n = static_cast<int>(images.dim(0)), c = static_cast<int>(images.dim(1));
  const int h = static_cast<int>(images.dim(2)), w = static_cast<int>(images.dim(3));
  if (c != cfg.in_channels) {
    throw InputError("forward: expected " + std::to_string(cfg.in_channels) +
                     " input channels, got " + std::to_string(c));
  }
  const int stride = 1 << (cfg.levels() - 1);
  if (n <= 0 || h <= 0 || w <= 0 || h % stride != 0 || w % stride != 0) {
    throw InputError("forward: spatial dims must be positive multiples of " +
                     std::to_string(stride) + ", got " + shape_to_string(images.shape()));
  }
  Act<T> a(c, n, h, w);
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const float* src = images.data() + (static_cast<int64_t>(ni) * c + ci) * h * w;
      std::copy(src, src + static_cast<int64_t>(h) * w, a.plane(ci, ni));
    }
  }
  return a;
}

template <typename T>
TensorD act_to_nchw(const Act<T>& a) {
  TensorD t({a.n, a.c, a.h, a.w});
  for (int ni = 0; ni < a.n; ++ni) {
    for (int ci = 0; ci < a.c; ++ci) {
      const T* src = a.plane(ci, ni);
      double* dst = t.data() + (static_cast<int64_t>(ni) * a.c + ci) * a.hw();
      for (int64_t i = 0; i < a.hw(); ++i) dst[i] = static_cast<double>(src[i]);
    }
  }
  return t;
}

template <typename T>
Act<T> nchw_to_act(const TensorD& t, int c, int n, int h, int w, const char* what) {
  const Shape expected{n, c, h, w};
  require_same_shape(t.shape(), expected, what);
  Act<T> a(c, n, h, w);
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const double* src = t.data() + (static_cast<int64_t>(ni) * c + ci) * a.hw();
      T* dst = a.plane(ci, ni);
      for (int64_t i = 0; i < a.hw(); ++i) dst[i] = static_cast<T>(src[i]);
    }
  }
  return a;
}

template <typename T>
void add_into(Act<T>& dst, const Act<T>& src) {
  for (size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
}

template <typename T>
ModelOutput run_forward(const EngineParams<T>& p, Act<T> x, NetCache<T>* cache) {
  const int levels = static_cast<int>(p.enc.size());
  if (cache) {
    cache->enc.assign(static_cast<size_t>(levels), {});
    cache->dec.assign(static_cast<size_t>(levels - 1), {});
    cache->pool_arg.assign(static_cast<size_t>(levels - 1), {});
  }
  std::vector<Act<T>> skips(static_cast<size_t>(levels));
  Act<T> cur = std::move(x);
  for (int l = 0; l < levels; ++l) {
    if (l > 0) {
      cur = maxpool_forward(skips[static_cast<size_t>(l - 1)],
                            cache ? &cache->pool_arg[static_cast<size_t>(l - 1)] : nullptr);
    }
    skips[static_cast<size_t>(l)] =
        block_forward(p.enc[static_cast<size_t>(l)], cur, cache ? &cache->enc[static_cast<size_t>(l)] : nullptr);
  }
  cur = std::move(skips.back());
  ModelOutput out;
  for (int l = levels - 2; l >= 0; --l) {
    Act<T> up = upconv_forward(p.up[static_cast<size_t>(l)], cur);
    Act<T> cat = concat_channels(skips[static_cast<size_t>(l)], up);
    cur = block_forward(p.dec[static_cast<size_t>(l)], cat, cache ? &cache->dec[static_cast<size_t>(l)] : nullptr);
    if (l == levels - 2) out.taps.high = act_to_nchw(cur);
  }
  out.taps.low = act_to_nchw(cur);
  Act<T> logits(static_cast<int>(p.head_w.rows()), cur.n, cur.h, cur.w);
  logits.mat().noalias() = p.head_w * cur.mat();
  for (int k = 0; k < logits.c; ++k) {
    const T b = p.head_b[static_cast<size_t>(k)];
    T* row = logits.v.data() + k * logits.cols();
    for (int64_t i = 0; i < logits.cols(); ++i) row[i] += b;
  }
  out.logits = act_to_nchw(logits);
  return out;
}

template <typename T>
void store_block_grads(NetworkWeights& grads, const std::string& prefix, const BlockGrads<T>& g) {
  auto put_mat = [&](const std::string& name, const RowMat<T>& m) {
    auto& dst = grads.param(name).values;
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(m.data()[i]);
  };
  put_mat(prefix + ".conv1.weight", g.conv1);
  put_mat(prefix + ".conv2.weight", g.conv2);
  grads.param(prefix + ".norm1.weight").values = g.g1;
  grads.param(prefix + ".norm1.bias").values = g.b1;
  grads.param(prefix + ".norm2.weight").values = g.g2;
  grads.param(prefix + ".norm2.bias").values = g.b2;
}

template <typename T>
NetworkWeights run_backward(const NetworkWeights& weights, const EngineParams<T>& p,
                            const NetCache<T>& cache, Act<T> d_logits, const Act<T>* d_low,
                            const Act<T>* d_high) {
  const int levels = static_cast<int>(p.enc.size());
  NetworkWeights grads = zeros_like(weights);

  // Head.
  const Act<T>& f0 = cache.dec[0].out;
  {
    RowMat<T> dw = d_logits.mat() * f0.mat().transpose();
    auto& dst = grads.param("head.weight").values;
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(dw.data()[i]);
    auto& db = grads.param("head.bias").values;
    for (int k = 0; k < d_logits.c; ++k) {
      const T* row = d_logits.v.data() + k * d_logits.cols();
      double s = 0.0;
      for (int64_t i = 0; i < d_logits.cols(); ++i) s += row[i];
      db[static_cast<size_t>(k)] = s;
    }
  }
  Act<T> d_cur(f0.c, f0.n, f0.h, f0.w);
  d_cur.mat().noalias() = p.head_w.transpose() * d_logits.mat();
  if (d_low) add_into(d_cur, *d_low);

  // Decoder, shallow to deep. d_skip[l] collects gradients on encoder outputs.
  std::vector<Act<T>> d_skip(static_cast<size_t>(levels));
  for (int l = 0; l <= levels - 2; ++l) {
    if (l == levels - 2 && d_high) add_into(d_cur, *d_high);
    const auto& bc = cache.dec[static_cast<size_t>(l)];
    BlockGrads<T> bg;
    Act<T> d_cat = block_backward(p.dec[static_cast<size_t>(l)], bc, std::move(d_cur), bg);
    store_block_grads(grads, dec_name(l), bg);

    const int cs = d_cat.c / 2;
    Act<T> d_sk(cs, d_cat.n, d_cat.h, d_cat.w), d_up(cs, d_cat.n, d_cat.h, d_cat.w);
    std::copy(d_cat.v.begin(), d_cat.v.begin() + static_cast<int64_t>(d_sk.v.size()), d_sk.v.begin());
    std::copy(d_cat.v.begin() + static_cast<int64_t>(d_sk.v.size()), d_cat.v.end(), d_up.v.begin());
    d_skip[static_cast<size_t>(l)] = std::move(d_sk);

    const Act<T>& up_in = l == levels - 2 ? cache.enc[static_cast<size_t>(levels - 1)].out
                                          : cache.dec[static_cast<size_t>(l + 1)].out;
    RowMat<T> d_wt;
    std::vector<double> d_b;
    d_cur = upconv_backward(p.up[static_cast<size_t>(l)], up_in, d_up, d_wt, d_b);
    auto& wdst = grads.param(dec_name(l) + ".up.weight").values;
    const int cin = up_in.c, cout = d_up.c;
    for (int ci = 0; ci < cin; ++ci) {
      for (int co = 0; co < cout; ++co) {
        for (int k = 0; k < 4; ++k) {
          wdst[static_cast<size_t>((ci * cout + co) * 4 + k)] = static_cast<double>(d_wt(co * 4 + k, ci));
        }
      }
    }
    grads.param(dec_name(l) + ".up.bias").values = d_b;
  }

  // Encoder, deep to shallow. d_cur holds the gradient on the deepest output.
  for (int l = levels - 1; l >= 0; --l) {
    if (l < levels - 1) add_into(d_cur, d_skip[static_cast<size_t>(l)]);
    const auto& bc = cache.enc[static_cast<size_t>(l)];
    BlockGrads<T> bg;
    Act<T> d_in = block_backward(p.enc[static_cast<size_t>(l)], bc, std::move(d_cur), bg);
    store_block_grads(grads, enc_name(l), bg);
    if (l > 0) {
      const Act<T>& prev = cache.enc[static_cast<size_t>(l - 1)].out;
      d_cur = Act<T>(prev.c, prev.n, prev.h, prev.w);
      maxpool_backward(d_in, cache.pool_arg[static_cast<size_t>(l - 1)], d_cur);
    }
  }
  return grads;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public entry points

namespace {

// Activation buffers of a few MB are allocated and released on every pass.
// glibc serves those through mmap and returns them on free, so each pass pays
// for fresh page faults; keeping them in the heap removes most of that cost.
void tune_allocator() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 512 << 20);
    mallopt(M_TRIM_THRESHOLD, 1024 << 20);
  });
#endif
}

}  // namespace

ModelOutput forward(const NetworkWeights& weights, const TensorF& images) {
  tune_allocator();
  const BackboneConfig& cfg = weights.config();
  if (cfg.precision == ComputePrecision::kFloat64) {
    return run_forward<double>(load_params<double>(weights), images_to_act<double>(images, cfg),
                               nullptr);
  }
  return run_forward<float>(load_params<float>(weights), images_to_act<float>(images, cfg), nullptr);
}

struct TrainingPass::Impl {
  virtual ~Impl() = default;
  virtual NetworkWeights backward(const TensorD& d_logits, const TensorD* d_low,
                                  const TensorD* d_high) const = 0;
  const NetworkWeights* weights = nullptr;
  ModelOutput output;
};

namespace {

template <typename T>
struct PassImpl final : TrainingPass::Impl {
  EngineParams<T> params;
  NetCache<T> cache;

  NetworkWeights backward(const TensorD& d_logits, const TensorD* d_low,
                          const TensorD* d_high) const override {
    const Act<T>& f0 = cache.dec[0].out;
    const Act<T>& fh = cache.dec.back().out;
    Act<T> dl = nchw_to_act<T>(d_logits, static_cast<int>(params.head_w.rows()), f0.n, f0.h, f0.w,
                               "backward: d_logits");
    Act<T> dlow, dhigh;
    if (d_low) dlow = nchw_to_act<T>(*d_low, f0.c, f0.n, f0.h, f0.w, "backward: d_low");
    if (d_high) dhigh = nchw_to_act<T>(*d_high, fh.c, fh.n, fh.h, fh.w, "backward: d_high");
    return run_backward(*weights, params, cache, std::move(dl), d_low ? &dlow : nullptr,
                        d_high ? &dhigh : nullptr);
  }
};

template <typename T>
std::unique_ptr<TrainingPass::Impl> make_pass(const NetworkWeights& weights, const TensorF& images) {
  auto impl = std::make_unique<PassImpl<T>>();
  impl->weights = &weights;
  impl->params = load_params<T>(weights);
  impl->output = run_forward(impl->params, images_to_act<T>(images, weights.config()), &impl->cache);
  return impl;
}

}  // namespace

TrainingPass::TrainingPass(const NetworkWeights& weights, const TensorF& images) {
  tune_allocator();
  if (weights.config().precision == ComputePrecision::kFloat64) {
    impl_ = make_pass<double>(weights, images);
  } else {
    impl_ = make_pass<float>(weights, images);
  }
}

TrainingPass::~TrainingPass() = default;
TrainingPass::TrainingPass(TrainingPass&&) noexcept = default;
TrainingPass& TrainingPass::operator=(TrainingPass&&) noexcept = default;

const ModelOutput& TrainingPass::output() const { return impl_->output; }

NetworkWeights TrainingPass::backward(const TensorD& d_logits, const TensorD* d_low,
                                      const TensorD* d_high) const {
  return impl_->backward(d_logits, d_low, d_high);
}

}  // namespace sdtlab
