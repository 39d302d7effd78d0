#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "run_config.hpp"
#include "smdt/evaluation.hpp"

namespace smdt::app {

struct Dataset {
  std::vector<TrainSample> train;
  std::vector<EvalClip> val;
};

/// Renders the train and validation splits from their seeds.
Dataset build_dataset(const RunConfig& cfg);
std::vector<ManifestEntry> manifest_entries(const RunConfig& cfg);

struct EvalPoint {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;
  double seconds = 0.0;
  double mean_loss = 0.0;  // over the epoch's steps
  EvalReport report;
};

struct TrainHooks {
  std::function<void(std::size_t step, const StepReport&)> on_step;
  std::function<void(const EvalPoint&)> on_eval;
};

struct TrainResult {
  Model model;
  std::vector<EvalPoint> evals;
  std::size_t steps = 0;
  double seconds = 0.0;
  bool reached_target = false;
  bool out_of_time = false;
};

/// Trains from cfg.seed and evaluates on the validation split. Deterministic
/// for a given config, independent of the thread count.
TrainResult run_training(const RunConfig& cfg, const Dataset& data, const TrainHooks& hooks = {});

/// Fraction of ground-truth instances carrying each class: the expected
/// AP of a ranking that ignores the class.
std::vector<double> class_prevalence(const std::vector<EvalClip>& clips, std::size_t num_classes);

}  // namespace smdt::app
