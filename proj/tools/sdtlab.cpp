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

// Command-line entry point: dataset synthesis, training, evaluation,
// ablation, gradient checks and reports.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sdtlab/checkpoint.hpp"
#include "sdtlab/error.hpp"
#include "sdtlab/evalkit.hpp"
#include "sdtlab/phantom.hpp"
#include "sdtlab/trainer.hpp"

namespace {

using json = nlohmann::json;
using namespace sdtlab;

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

TrainConfig config_with_env(const std::string& path) {
  TrainConfig c = load_train_config(path);
  if (const char* env = std::getenv("SDTLAB_SEED"); env && *env) {
    try {
      size_t used = 0;
      c.seed = std::stoull(env, &used);
      if (env[used] != '\0') throw std::invalid_argument(env);
    } catch (const std::exception&) {
      throw UsageError(std::string("SDTLAB_SEED is not an unsigned integer: ") + env);
    }
  }
  return c;
}

void print_dice(const DiceReport& r, int num_classes) {
  const json j = dice_to_json(r);
  std::printf("%-8s %s\n", "class", "dice");
  for (const auto& [name, v] : j["per_class"].items()) std::printf("%-8s %.4f\n", name.c_str(), v.get<double>());
  std::printf("%-8s %.4f\n", "mean", r.mean);
  std::printf("samples  %lld (classes %d)\n", static_cast<long long>(r.samples), num_classes);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sdtlab: scribble-supervised segmentation with dynamic dual teachers"};
  app.require_subcommand(1);
  bool as_json = false;
  app.add_flag("--json", as_json, "Print machine-readable JSON instead of tables");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a phantom dataset");
  std::string synth_out;
  DatasetSpec spec;
  synth->add_option("--out", synth_out, "Output dataset directory")->required();
  synth->add_option("--n-train", spec.n_train, "Training samples")->check(CLI::NonNegativeNumber);
  synth->add_option("--n-val", spec.n_val, "Validation samples")->check(CLI::NonNegativeNumber);
  synth->add_option("--n-test", spec.n_test, "Test samples")->check(CLI::NonNegativeNumber);
  synth->add_option("--size", spec.image_size, "Square image size, a multiple of 16")->capture_default_str();
  synth->add_option("--seed", spec.seed, "Generator seed")->capture_default_str();
  synth->add_option("--classes", spec.num_classes, "Number of classes (2..4)")->capture_default_str();
  synth->add_option("--max-scribble-fraction", spec.max_scribble_fraction,
                    "Cap on the annotated pixel fraction")
      ->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Train a student with the configured teachers");
  std::string train_cfg, train_data, train_out, train_resume;
  int64_t stop_at = -1;
  train->add_option("--config", train_cfg, "key = value config file")->required()->check(CLI::ExistingFile);
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Run directory")->required();
  train->add_option("--resume", train_resume, "Resume from a state checkpoint")->check(CLI::ExistingFile);
  train->add_option("--stop-at", stop_at, "Stop after this iteration (state is saved)");

  // eval
  auto* eval = app.add_subcommand("eval", "Dice of a checkpoint on a dataset split");
  std::string eval_ckpt, eval_data, eval_split = "test";
  eval->add_option("--ckpt", eval_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--split", eval_split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train and score the seven component configurations");
  std::string ab_cfg, ab_data, ab_out;
  ablate->add_option("--config", ab_cfg, "Base config file")->required()->check(CLI::ExistingFile);
  ablate->add_option("--data", ab_data, "Dataset directory")->required();
  ablate->add_option("--out", ab_out, "Output directory")->required();

  // gradcheck
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every loss gradient");
  uint64_t grad_seed = 0;
  int grad_trials = 20;
  grad->add_option("--seed", grad_seed, "Seed for the random inputs")->capture_default_str();
  grad->add_option("--trials", grad_trials, "Random inputs per loss")->check(CLI::PositiveNumber)->capture_default_str();

  // report
  auto* report = app.add_subcommand("report", "Write report.md and plots for a run directory");
  std::string report_run;
  report->add_option("--run", report_run, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) {
      if (spec.image_size <= 0 || spec.image_size % 16 != 0) {
        throw UsageError("--size must be a positive multiple of 16");
      }
      spec.validate();
      const Dataset ds = generate_dataset(spec);
      save_dataset(synth_out, ds);
      const json j = {{"out", synth_out},
                      {"num_classes", spec.num_classes},
                      {"size", spec.image_size},
                      {"seed", spec.seed},
                      {"splits", {{"train", spec.n_train}, {"val", spec.n_val}, {"test", spec.n_test}}},
                      {"fingerprint", hex64(dataset_fingerprint(ds))}};
      if (as_json) {
        std::cout << j.dump() << '\n';
      } else {
        std::printf("wrote %s: %d train / %d val / %d test, %dx%d, %d classes, seed %llu, fingerprint %s\n",
                    synth_out.c_str(), spec.n_train, spec.n_val, spec.n_test, spec.image_size,
                    spec.image_size, spec.num_classes, static_cast<unsigned long long>(spec.seed),
                    j["fingerprint"].get<std::string>().c_str());
      }
    } else if (*train) {
      const TrainConfig cfg = config_with_env(train_cfg);
      RunOptions opts;
      if (!train_resume.empty()) opts.resume = train_resume;
      if (stop_at >= 0) opts.stop_at = stop_at;
      const RunSummary s = run(cfg, std::filesystem::path(train_data), train_out, opts);
      const json j = {{"iterations", s.iterations},
                      {"seconds", s.seconds},
                      {"last_checkpoint", s.last_checkpoint.string()},
                      {"best_checkpoint", s.best_checkpoint.string()},
                      {"best_val_dice", s.best_val < 0 ? json(nullptr) : json(s.best_val)},
                      {"best_iteration", s.best_iteration}};
      if (as_json) {
        std::cout << j.dump() << '\n';
      } else {
        std::printf("trained %lld iterations in %.1f s\n", static_cast<long long>(s.iterations), s.seconds);
        std::printf("last: %s\nbest: %s\n", s.last_checkpoint.c_str(), s.best_checkpoint.c_str());
        if (s.best_val >= 0) {
          std::printf("best validation Dice %.4f at iteration %lld\n", s.best_val,
                      static_cast<long long>(s.best_iteration));
        }
      }
    } else if (*eval) {
      const Dataset ds = load_dataset(eval_data);
      const NetworkWeights w = load_weights(eval_ckpt);
      if (w.config().num_classes != ds.spec.num_classes) {
        throw InputError("checkpoint and dataset disagree on the class count");
      }
      const DiceReport r = evaluate_samples(w, ds.split(parse_split(eval_split)));
      if (as_json) {
        json j = dice_to_json(r);
        j["split"] = eval_split;
        j["num_classes"] = ds.spec.num_classes;
        std::cout << j.dump() << '\n';
      } else {
        print_dice(r, ds.spec.num_classes);
      }
    } else if (*ablate) {
      const TrainConfig cfg = config_with_env(ab_cfg);
      const AblationGrid g = run_ablation(cfg, ab_data, ab_out);
      if (as_json) {
        json rows = json::array();
        for (const auto& r : g.rows) {
          rows.push_back({{"teachers", teacher_mode_name(r.teachers)},
                          {"policy", policy_name(r.policy)},
                          {"prp", r.prp},
                          {"hico", r.hico},
                          {"dice", dice_to_json(r.dice)},
                          {"fairness", hex64(r.fairness)}});
        }
        std::cout << json{{"rows", rows}, {"fairness", hex64(g.fairness)}, {"fair", g.fair}}.dump() << '\n';
      } else {
        std::cout << render_ablation_markdown(g);
      }
      if (!g.fair) return kRuntime;
    } else if (*grad) {
      const GradcheckReport r = gradcheck_suite(grad_seed, grad_trials);
      if (as_json) {
        json entries = json::array();
        for (const auto& e : r.entries) {
          entries.push_back({{"name", e.name},
                             {"max_rel_error", e.max_rel_error},
                             {"trials", e.trials},
                             {"checked", e.checked},
                             {"skipped", e.skipped},
                             {"passed", e.passed}});
        }
        std::cout << json{{"tolerance", r.tolerance}, {"step", r.step}, {"entries", entries}, {"passed", r.passed()}}.dump()
                  << '\n';
      } else {
        std::printf("%-20s %-12s %-8s %s\n", "loss", "max_rel_err", "skipped", "result");
        for (const auto& e : r.entries) {
          std::printf("%-20s %-12.3e %-8lld %s\n", e.name.c_str(), e.max_rel_error,
                      static_cast<long long>(e.skipped), e.passed ? "PASS" : "FAIL");
        }
      }
      return r.passed() ? kOk : kRuntime;
    } else if (*report) {
      const auto path = emit_report(report_run);
      if (as_json) {
        std::cout << json{{"report", path.string()}}.dump() << '\n';
      } else {
        std::printf("wrote %s\n", path.c_str());
      }
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kOk;
}
