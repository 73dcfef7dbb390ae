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

#include "sdtlab/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cassert>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

#include "sdtlab/checkpoint.hpp"
#include "sdtlab/error.hpp"
#include "sdtlab/evalkit.hpp"

namespace sdtlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate(int num_classes) const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (total_iters <= 0) throw ConfigError("total_iters must be positive");
  if (warmup_iters < 0 || warmup_iters > total_iters) {
    throw ConfigError("warmup_iters must lie in [0, total_iters]");
  }
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  const double tau_min = num_classes > 0 ? 1.0 / num_classes : 0.0;
  if (!(tau >= tau_min && tau <= 1.0)) {
    throw ConfigError("tau must lie in [1/K, 1], got " + std::to_string(tau));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (teachers == TeacherMode::kSingle && policy != PseudoPolicy::kNone) {
    throw ConfigError("a single teacher takes policy = none");
  }
  if (teachers == TeacherMode::kDual && policy == PseudoPolicy::kNone) {
    throw ConfigError("dual teachers need policy = avg or dts");
  }
  if (per_sample && policy != PseudoPolicy::kDts) {
    throw ConfigError("per_sample selection requires policy = dts");
  }
  if (!(rotation_prob >= 0.0 && rotation_prob <= 1.0)) {
    throw ConfigError("rotation_prob must lie in [0, 1]");
  }
  if (val_every < 0 || checkpoint_every < 0 || log_every < 0) {
    throw ConfigError("val_every, checkpoint_every and log_every must be non-negative");
  }
  BackboneConfig bc;
  bc.widths = widths;
  bc.norm_groups = norm_groups;
  bc.validate();
}

const char* policy_name(PseudoPolicy p) {
  switch (p) {
    case PseudoPolicy::kNone: return "none";
    case PseudoPolicy::kAvg: return "avg";
    case PseudoPolicy::kDts: return "dts";
  }
  return "?";
}

const char* teacher_mode_name(TeacherMode m) { return m == TeacherMode::kSingle ? "single" : "dual"; }

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("bad value for '" + key + "': '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw ConfigError("bad boolean for '" + key + "': '" + v + "'");
}

template <typename E>
E parse_enum(const std::string& key, const std::string& v,
             std::initializer_list<std::pair<const char*, E>> names) {
  for (const auto& [name, value] : names) {
    if (v == name) return value;
  }
  throw ConfigError("bad value for '" + key + "': '" + v + "'");
}

std::string fmt_double(double v) {
  // Shortest text that reads back to the same double.
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

struct Field {
  const char* key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    auto real = [&f](const char* key, double TrainConfig::*m) {
      f.push_back({key, [key, m](TrainConfig& c, const std::string& v) { c.*m = parse_number<double>(key, v); },
                   [m](const TrainConfig& c) { return fmt_double(c.*m); }});
    };
    auto integer = [&f](const char* key, int64_t TrainConfig::*m) {
      f.push_back({key, [key, m](TrainConfig& c, const std::string& v) { c.*m = parse_number<int64_t>(key, v); },
                   [m](const TrainConfig& c) { return std::to_string(c.*m); }});
    };
    auto flag = [&f](const char* key, bool TrainConfig::*m) {
      f.push_back({key, [key, m](TrainConfig& c, const std::string& v) { c.*m = parse_bool(key, v); },
                   [m](const TrainConfig& c) { return std::string(c.*m ? "true" : "false"); }});
    };
    real("lr", &TrainConfig::lr);
    real("momentum", &TrainConfig::momentum);
    real("weight_decay", &TrainConfig::weight_decay);
    integer("total_iters", &TrainConfig::total_iters);
    integer("warmup_iters", &TrainConfig::warmup_iters);
    f.push_back({"batch_size",
                 [](TrainConfig& c, const std::string& v) { c.batch_size = parse_number<int>("batch_size", v); },
                 [](const TrainConfig& c) { return std::to_string(c.batch_size); }});
    real("tau", &TrainConfig::tau);
    real("alpha", &TrainConfig::alpha);
    f.push_back({"seed",
                 [](TrainConfig& c, const std::string& v) { c.seed = parse_number<uint64_t>("seed", v); },
                 [](const TrainConfig& c) { return std::to_string(c.seed); }});
    f.push_back({"teachers",
                 [](TrainConfig& c, const std::string& v) {
                   c.teachers = parse_enum<TeacherMode>("teachers", v, {{"single", TeacherMode::kSingle},
                                                                        {"dual", TeacherMode::kDual}});
                 },
                 [](const TrainConfig& c) { return std::string(teacher_mode_name(c.teachers)); }});
    f.push_back({"policy",
                 [](TrainConfig& c, const std::string& v) {
                   c.policy = parse_enum<PseudoPolicy>(
                       "policy", v, {{"none", PseudoPolicy::kNone}, {"avg", PseudoPolicy::kAvg}, {"dts", PseudoPolicy::kDts}});
                 },
                 [](const TrainConfig& c) { return std::string(policy_name(c.policy)); }});
    flag("prp", &TrainConfig::prp);
    flag("hico", &TrainConfig::hico);
    flag("per_sample", &TrainConfig::per_sample);
    flag("pce_unnormalized", &TrainConfig::pce_unnormalized);
    flag("poly_decay", &TrainConfig::poly_decay);
    f.push_back({"teacher_init",
                 [](TrainConfig& c, const std::string& v) {
                   c.teacher_init = parse_enum<TeacherInit>(
                       "teacher_init", v, {{"independent", TeacherInit::kIndependent}, {"student", TeacherInit::kStudent}});
                 },
                 [](const TrainConfig& c) {
                   return std::string(c.teacher_init == TeacherInit::kIndependent ? "independent" : "student");
                 }});
    f.push_back({"warmup_ema",
                 [](TrainConfig& c, const std::string& v) {
                   c.warmup_ema = parse_enum<WarmupEma>("warmup_ema", v, {{"both", WarmupEma::kBoth}, {"none", WarmupEma::kNone}});
                 },
                 [](const TrainConfig& c) { return std::string(c.warmup_ema == WarmupEma::kBoth ? "both" : "none"); }});
    flag("ema_ramp", &TrainConfig::ema_ramp);
    flag("augment", &TrainConfig::augment);
    real("rotation_prob", &TrainConfig::rotation_prob);
    f.push_back({"widths",
                 [](TrainConfig& c, const std::string& v) {
                   std::vector<int> w;
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ',')) w.push_back(parse_number<int>("widths", trim(item)));
                   c.widths = std::move(w);
                 },
                 [](const TrainConfig& c) {
                   std::string s;
                   for (size_t i = 0; i < c.widths.size(); ++i) s += (i ? "," : "") + std::to_string(c.widths[i]);
                   return s;
                 }});
    f.push_back({"norm_groups",
                 [](TrainConfig& c, const std::string& v) { c.norm_groups = parse_number<int>("norm_groups", v); },
                 [](const TrainConfig& c) { return std::to_string(c.norm_groups); }});
    f.push_back({"precision",
                 [](TrainConfig& c, const std::string& v) {
                   c.precision = parse_enum<ComputePrecision>(
                       "precision", v, {{"float32", ComputePrecision::kFloat32}, {"float64", ComputePrecision::kFloat64}});
                 },
                 [](const TrainConfig& c) {
                   return std::string(c.precision == ComputePrecision::kFloat32 ? "float32" : "float64");
                 }});
    integer("val_every", &TrainConfig::val_every);
    integer("checkpoint_every", &TrainConfig::checkpoint_every);
    integer("log_every", &TrainConfig::log_every);
    return f;
  }();
  return table;
}

}  // namespace

TrainConfig parse_train_config(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    const auto& table = fields();
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return key == f.key; });
    if (it == table.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->set(c, value);
  }
  return c;
}

TrainConfig load_train_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_train_config(ss.str());
}

std::string format_train_config(const TrainConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(config) + "\n";
  return out;
}

json train_config_to_json(const TrainConfig& config) {
  json j = json::object();
  for (const auto& f : fields()) j[f.key] = f.get(config);
  return j;
}

// ---------------------------------------------------------------------------
// State, batches, optimizer

TrainState init_train_state(const TrainConfig& config, int num_classes) {
  BackboneConfig bc;
  bc.num_classes = num_classes;
  bc.widths = config.widths;
  bc.norm_groups = config.norm_groups;
  bc.precision = config.precision;
  TrainState s;
  s.student = build(bc, config.seed);
  if (config.teacher_init == TeacherInit::kIndependent) {
    s.teachers.t1 = build(bc, derive_seed(config.seed, Stream::kInit, 1));
    s.teachers.t2 = build(bc, derive_seed(config.seed, Stream::kInit, 2));
  } else {
    s.teachers.t1 = copy_weights(s.student);
    s.teachers.t2 = copy_weights(s.student);
  }
  s.teachers.ema_decay = config.alpha;
  s.velocity = zeros_like(s.student);
  return s;
}

Batch make_batch(const std::vector<PhantomSample>& train, const TrainConfig& config,
                 int64_t iteration) {
  if (train.empty()) throw InputError("make_batch: empty training split");
  const int64_t n = static_cast<int64_t>(train.size());
  const int64_t bsz = config.batch_size;
  const int h = train.front().height(), w = train.front().width();
  Batch batch{TensorF({bsz, 1, h, w}), LabelMap({bsz, h, w})};
  AugmentOptions aug;
  aug.continuous_rotation_prob = config.rotation_prob;

  int64_t cached_epoch = -1;
  std::vector<int64_t> order;
  for (int64_t j = 0; j < bsz; ++j) {
    const int64_t pos = iteration * bsz + j;
    const int64_t epoch = pos / n;
    if (epoch != cached_epoch) {
      order.resize(static_cast<size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      Rng rng = make_rng(config.seed, Stream::kShuffle, static_cast<uint64_t>(epoch));
      std::shuffle(order.begin(), order.end(), rng);
      cached_epoch = epoch;
    }
    const PhantomSample& src = train[static_cast<size_t>(order[static_cast<size_t>(pos % n)])];
    if (src.height() != h || src.width() != w) throw InputError("make_batch: mixed slice sizes");
    PhantomSample sample;
    if (config.augment) {
      Rng rng = make_rng(config.seed, Stream::kAugment, static_cast<uint64_t>(pos));
      sample = augment(src, rng, aug);
    } else {
      sample = src;
    }
    const int64_t hw = static_cast<int64_t>(h) * w;
    std::copy(sample.image.data(), sample.image.data() + hw, batch.images.data() + j * hw);
    std::copy(sample.scribble.data(), sample.scribble.data() + hw, batch.scribble.data() + j * hw);
  }
  return batch;
}

void sgd_update(NetworkWeights& weights, const NetworkWeights& grads, NetworkWeights& velocity,
                double lr, double momentum, double weight_decay) {
  if (weights.fingerprint() != grads.fingerprint() || weights.fingerprint() != velocity.fingerprint()) {
    throw InputError("sgd_update: weights, gradients and momentum differ in shape");
  }
  auto& wp = weights.params();
  auto& vp = velocity.params();
  const auto& gp = grads.params();
  for (size_t j = 0; j < wp.size(); ++j) {
    auto& th = wp[j].values;
    auto& v = vp[j].values;
    const auto& g = gp[j].values;
    if (th.size() != g.size() || th.size() != v.size()) {
      throw InputError("sgd_update: size mismatch in " + wp[j].name);
    }
    for (size_t i = 0; i < th.size(); ++i) {
      v[i] = momentum * v[i] + (g[i] + weight_decay * th[i]);
      th[i] -= lr * v[i];
    }
  }
}

double learning_rate_at(const TrainConfig& config, int64_t iteration) {
  if (!config.poly_decay) return config.lr;
  const double frac = static_cast<double>(iteration) / static_cast<double>(config.total_iters);
  return config.lr * std::pow(std::max(0.0, 1.0 - frac), 0.9);
}

namespace {

double ema_decay_at(const TrainConfig& config, int64_t iteration) {
  if (!config.ema_ramp) return config.alpha;
  return std::min(config.alpha, 1.0 - 1.0 / static_cast<double>(iteration + 1));
}

#ifndef NDEBUG
uint64_t weights_digest(const NetworkWeights& w) {
  uint64_t h = w.fingerprint();
  for (const auto& p : w.params()) {
    for (double v : p.values) h = mix64(h ^ std::bit_cast<uint64_t>(v));
  }
  return h;
}
#endif

}  // namespace

LossBreakdown train_step(TrainState& state, const Batch& batch, const TrainConfig& config) {
  const int64_t t = state.iteration;
  const bool warm = t < config.warmup_iters;
  const bool dual = config.teachers == TeacherMode::kDual;
#ifndef NDEBUG
  const uint64_t t1_before = weights_digest(state.teachers.t1);
  const uint64_t t2_before = weights_digest(state.teachers.t2);
#endif

  TrainingPass pass(state.student, batch.images);
  const ModelOutput& out = pass.output();
  const TensorD probs = softmax(out.logits);
  TensorD d_probs;
  PceOptions pce{config.pce_unnormalized};
  const double scribble = pce_loss(probs, batch.scribble, {&d_probs, 1.0}, pce);

  double pseudo = 0.0, hico = 0.0, reliable = 0.0;
  std::optional<Teacher> selected;
  TensorD d_low, d_high;
  if (!warm) {
    // prp off keeps every pixel: the max probability is always >= 0.
    const double tau = config.prp ? config.tau : 0.0;
    PseudoLabelMap pl;
    FeatureTaps taps;
    if (!dual) {
      ModelOutput t1 = forward(state.teachers.t1, batch.images);
      pl = pick_reliable_pixels(softmax(t1.logits), tau);
      taps = std::move(t1.taps);
    } else {
      const ModelOutput t1 = forward(state.teachers.t1, batch.images);
      const ModelOutput t2 = forward(state.teachers.t2, batch.images);
      if (config.policy == PseudoPolicy::kAvg) {
        AvgPolicyResult r = avg_policy(t1, t2, tau);
        pl = std::move(r.pseudo);
        taps = std::move(r.taps);
      } else {
        DtsOptions opts{tau, config.per_sample, pce};
        DtsResult r = dts_step(state.teachers, out, t1, t2, batch.scribble, t, opts);
        pl = std::move(r.pseudo);
        taps = std::move(r.taps);
        selected = r.record.selected;
      }
    }
    reliable = pl.reliable_fraction();
    pseudo = pseudo_loss(probs, pl, {&d_probs, 1.0});
    if (config.hico) hico = hico_loss(out.taps, taps, {&d_low, 1.0}, {&d_high, 1.0});
  }

  LossBreakdown loss;
  try {
    loss = total_loss(scribble, pseudo, hico);
  } catch (const NumericalError& e) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "iteration %lld: scribble=%.17g pseudo=%.17g hico=%.17g (%s)",
                  static_cast<long long>(t), scribble, pseudo, hico, e.what());
    throw NumericalError(buf);
  }
  loss.reliable_fraction = reliable;
  loss.selected = selected;

  const TensorD d_logits = softmax_backward(probs, d_probs);
  NetworkWeights grads = pass.backward(d_logits, d_low.empty() ? nullptr : &d_low,
                                       d_high.empty() ? nullptr : &d_high);
#ifndef NDEBUG
  // Teachers never see gradients; only the EMA below may move them.
  assert(weights_digest(state.teachers.t1) == t1_before);
  assert(weights_digest(state.teachers.t2) == t2_before);
#endif
  sgd_update(state.student, grads, state.velocity, learning_rate_at(config, t), config.momentum,
             config.weight_decay);

  const double a = ema_decay_at(config, t);
  if (!dual) {
    ema_update(state.teachers.t1, state.student, a);
  } else if (warm) {
    if (config.warmup_ema == WarmupEma::kBoth) {
      ema_update(state.teachers.t1, state.student, a);
      ema_update(state.teachers.t2, state.student, a);
    }
  } else if (config.policy == PseudoPolicy::kAvg) {
    ema_update(state.teachers.t1, state.student, a);
    ema_update(state.teachers.t2, state.student, a);
  } else {
    ema_update(state.teachers.get(*selected), state.student, a);
  }

  state.history.push_back({t, loss});
  state.iteration = t + 1;
  return loss;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

const char* selected_name(const std::optional<Teacher>& t) { return t ? teacher_name(*t) : "-"; }

std::optional<Teacher> parse_selected(const std::string& s) {
  if (s == "T1") return Teacher::kT1;
  if (s == "T2") return Teacher::kT2;
  return std::nullopt;
}

}  // namespace

void save_train_state(const fs::path& path, const TrainState& state, const TrainConfig& config) {
  json history = json::array();
  for (const auto& r : state.history) {
    history.push_back({r.iteration, r.loss.scribble, r.loss.pseudo, r.loss.hico, r.loss.total,
                       r.loss.reliable_fraction, selected_name(r.loss.selected)});
  }
  json selections = json::array();
  for (const auto& r : state.teachers.selection_log) {
    selections.push_back({r.iteration, teacher_name(r.selected), r.loss_t1, r.loss_t2});
  }
  const json meta = {{"kind", "train_state"},
                     {"iteration", state.iteration},
                     {"ema_decay", state.teachers.ema_decay},
                     {"best_val", state.best_val},
                     {"best_iteration", state.best_iteration},
                     {"precision", config.precision == ComputePrecision::kFloat64 ? "float64" : "float32"},
                     {"config", format_train_config(config)},
                     {"history", std::move(history)},
                     {"selection_log", std::move(selections)}};
  save_checkpoint(path,
                  {{"student", &state.student},
                   {"teacher1", &state.teachers.t1},
                   {"teacher2", &state.teachers.t2},
                   {"velocity", &state.velocity}},
                  meta, Dtype::kFloat64);
}

TrainState load_train_state(const fs::path& path) {
  Checkpoint c = load_checkpoint(path);
  try {
    if (c.metadata.value("kind", "") != "train_state") {
      throw IoError("not a training-state checkpoint: " + path.string());
    }
    TrainState s;
    s.iteration = c.metadata.at("iteration").get<int64_t>();
    s.student = c.section("student");
    s.teachers.t1 = c.section("teacher1");
    s.teachers.t2 = c.section("teacher2");
    s.velocity = c.section("velocity");
    const ComputePrecision p = c.metadata.at("precision").get<std::string>() == "float64"
                                   ? ComputePrecision::kFloat64
                                   : ComputePrecision::kFloat32;
    for (NetworkWeights* w : {&s.student, &s.teachers.t1, &s.teachers.t2, &s.velocity}) w->set_precision(p);
    s.teachers.ema_decay = c.metadata.at("ema_decay").get<double>();
    s.best_val = c.metadata.at("best_val").get<double>();
    s.best_iteration = c.metadata.at("best_iteration").get<int64_t>();
    for (const auto& r : c.metadata.at("history")) {
      LossRecord rec;
      rec.iteration = r.at(0).get<int64_t>();
      rec.loss.scribble = r.at(1).get<double>();
      rec.loss.pseudo = r.at(2).get<double>();
      rec.loss.hico = r.at(3).get<double>();
      rec.loss.total = r.at(4).get<double>();
      rec.loss.reliable_fraction = r.at(5).get<double>();
      rec.loss.selected = parse_selected(r.at(6).get<std::string>());
      s.history.push_back(rec);
    }
    for (const auto& r : c.metadata.at("selection_log")) {
      s.teachers.selection_log.push_back({r.at(0).get<int64_t>(),
                                          *parse_selected(r.at(1).get<std::string>()),
                                          r.at(2).get<double>(), r.at(3).get<double>()});
    }
    return s;
  } catch (const json::exception& e) {
    throw IoError("malformed training state " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Full run

namespace {

constexpr const char* kLossHeader = "iter,scribble,pseudo,hico,total,reliable_fraction,selected";
constexpr const char* kSelectionHeader = "iteration,selected,L_T1,L_T2";

// Keeps the header and the rows whose leading iteration is below `limit`;
// creates the file with just the header when it does not exist.
void truncate_csv(const fs::path& path, const char* header, int64_t limit) {
  std::vector<std::string> keep{header};
  if (std::ifstream in(path); in) {
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto comma = line.find(',');
      if (std::stoll(line.substr(0, comma)) < limit) keep.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& l : keep) out << l << '\n';
}

void flush_logs(TrainState& state, const fs::path& out_dir) {
  {
    std::ofstream f(out_dir / "loss.csv", std::ios::app);
    if (!f) throw IoError("cannot append to loss.csv");
    char buf[256];
    for (const auto& r : state.history) {
      std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%s\n",
                    static_cast<long long>(r.iteration), r.loss.scribble, r.loss.pseudo,
                    r.loss.hico, r.loss.total, r.loss.reliable_fraction, selected_name(r.loss.selected));
      f << buf;
    }
  }
  {
    std::ofstream f(out_dir / "selection.csv", std::ios::app);
    if (!f) throw IoError("cannot append to selection.csv");
    char buf[128];
    for (const auto& r : state.teachers.selection_log) {
      std::snprintf(buf, sizeof(buf), "%lld,%s,%.17g,%.17g\n", static_cast<long long>(r.iteration),
                    teacher_name(r.selected), r.loss_t1, r.loss_t2);
      f << buf;
    }
  }
  state.history.clear();
  state.teachers.selection_log.clear();
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

RunSummary run(const TrainConfig& config, const Dataset& dataset, const fs::path& out_dir,
               const RunOptions& options) {
  const int k = dataset.spec.num_classes;
  config.validate(k);
  if (dataset.train.empty()) throw InputError("run: the training split is empty");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  const auto start = std::chrono::steady_clock::now();
  TrainState state;
  if (options.resume) {
    state = load_train_state(*options.resume);
    if (state.student.config().num_classes != k) throw ConfigError("resume: class count differs");
    for (NetworkWeights* w : {&state.student, &state.teachers.t1, &state.teachers.t2, &state.velocity}) {
      w->set_precision(config.precision);
    }
  } else {
    state = init_train_state(config, k);
  }
  const fs::path loss_csv = out_dir / "loss.csv", sel_csv = out_dir / "selection.csv";
  truncate_csv(loss_csv, kLossHeader, state.iteration);
  truncate_csv(sel_csv, kSelectionHeader, state.iteration);
  // Rows carried inside a resumed state are written again below.
  flush_logs(state, out_dir);

  const fs::path best_path = out_dir / "best.ckpt", last_path = out_dir / "last.ckpt";
  const fs::path state_path = out_dir / "state.ckpt";
  const int64_t end = std::min(config.total_iters, options.stop_at.value_or(config.total_iters));
  const bool validate = config.val_every > 0 && !dataset.val.empty();

  while (state.iteration < end) {
    const int64_t t = state.iteration;
    const Batch batch = make_batch(dataset.train, config, t);
    const LossBreakdown loss = train_step(state, batch, config);
    const int64_t done = t + 1;
    if (config.log_every > 0 && done % config.log_every == 0) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::fprintf(stderr, "[%lld/%lld] total=%.4f scribble=%.4f pseudo=%.4f hico=%.4f sel=%s %.0fs\n",
                   static_cast<long long>(done), static_cast<long long>(config.total_iters), loss.total,
                   loss.scribble, loss.pseudo, loss.hico, selected_name(loss.selected), secs);
    }
    if (validate && (done % config.val_every == 0 || done == config.total_iters)) {
      const double dice = evaluate_samples(state.student, dataset.val).mean;
      if (dice > state.best_val) {
        state.best_val = dice;
        state.best_iteration = done;
        save_checkpoint(best_path, {{"model", &state.student}}, {{"iteration", done}, {"val_dice", dice}});
      }
    }
    if (state.history.size() >= 256) flush_logs(state, out_dir);
    if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) {
      flush_logs(state, out_dir);
      save_train_state(state_path, state, config);
    }
  }
  flush_logs(state, out_dir);
  save_train_state(state_path, state, config);

  RunSummary summary;
  summary.iterations = state.iteration;
  summary.last_checkpoint = last_path;
  summary.best_checkpoint = best_path;
  save_checkpoint(last_path, {{"model", &state.student}}, {{"iteration", state.iteration}});
  if (state.best_iteration < 0) {
    // Nothing validated: the best checkpoint is the last one.
    save_checkpoint(best_path, {{"model", &state.student}}, {{"iteration", state.iteration}});
  }
  summary.best_val = state.best_val;
  summary.best_iteration = state.best_iteration;
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  json meta = {{"config", train_config_to_json(config)},
               {"dataset_fingerprint", hex64(dataset_fingerprint(dataset))},
               {"num_classes", k},
               {"image_size", dataset.spec.image_size},
               {"splits", {{"train", dataset.train.size()}, {"val", dataset.val.size()}, {"test", dataset.test.size()}}},
               {"num_parameters", state.student.num_parameters()},
               {"iterations", state.iteration},
               {"seconds", summary.seconds},
               {"best_source", state.best_iteration < 0 ? "last" : "validation"},
               {"best_iteration", state.best_iteration},
               {"best_val_dice", state.best_val < 0 ? json(nullptr) : json(state.best_val)}};
  if (!dataset.val.empty()) meta["final_val_dice"] = evaluate_samples(state.student, dataset.val).mean;
  if (!dataset.test.empty()) {
    meta["final_test"] = dice_to_json(evaluate_samples(state.student, dataset.test));
    if (state.best_iteration >= 0) {
      meta["best_test"] = dice_to_json(evaluate_samples(load_weights(best_path), dataset.test));
    }
  }
  std::ofstream f(out_dir / "train_meta.json", std::ios::trunc);
  if (!f) throw IoError("cannot write train_meta.json");
  f << meta.dump(2) << '\n';
  return summary;
}

RunSummary run(const TrainConfig& config, const fs::path& dataset_dir, const fs::path& out_dir,
               const RunOptions& options) {
  return run(config, load_dataset(dataset_dir), out_dir, options);
}

}  // namespace sdtlab
