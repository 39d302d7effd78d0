#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include "smdt/assignment.hpp"
#include "smdt/criterion.hpp"
#include "smdt/data.hpp"
#include "smdt/model.hpp"

namespace smdt::app {

struct DataSettings {
  std::uint64_t base_seed = 1000;
  std::size_t train_clips = 2000;
  std::size_t val_clips = 200;
  /// Amplitude of the training-time box jitter; 0 disables.
  double box_jitter = 0.0;
  /// Amplitude of the training-time brightness/contrast jitter; 0 disables.
  double color_jitter = 0.0;
  SpriteConfig sprites;
};

struct TrainSettings {
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  /// 0 reads SMDT_THREADS, then falls back to the hardware concurrency.
  std::size_t threads = 0;
  /// Validation every this many epochs; 0 evaluates only at the end.
  std::size_t eval_every = 2;
  /// Stops once validation mAP reaches this value; 0 disables.
  double target_map = 0.0;
  /// Wall-clock budget in seconds, checked between steps; 0 disables.
  double time_budget = 0.0;
};

struct GradcheckSettings {
  double eps = 1e-5;
  double floor = 1e-8;
  double threshold = 1e-4;
  std::size_t entries_per_tensor = 6;
  /// Initialisation scale of the checked weights.
  double init_std = 0.2;
};

struct RunConfig {
  std::uint64_t seed = 7;
  ModelConfig model;
  DataSettings data;
  /// The toy run departs from the library defaults in the class weight, the
  /// no-actor weight and the optimizer schedule; see configs/toy.json.
  LossWeights weights{2.0, 5.0, 2.0, 1.0};
  double no_actor_weight = 0.1;
  CostMode cost_mode = CostMode::Printed;
  OptimizerConfig optimizer{3e-3, 1e-4, 0.9, 0.999, 1e-8, 200, 1, 0.0, 1.0};
  TrainSettings train;
  double theta = 0.2;
  double iou_threshold = 0.5;
  GradcheckSettings gradcheck;

  /// Cross-checks every section; throws ConfigError.
  void validate() const;
  std::size_t steps_per_epoch() const;
  /// The optimizer settings with the schedule length filled in.
  OptimizerConfig optimizer_for_run() const;
  TrainOptions train_options() const;
};

/// Parses JSON (comments allowed). Unknown keys, wrong types and invalid
/// values all raise ConfigError; the result is validated.
RunConfig parse_run_config(const std::string& text, const std::string& origin = "config");
RunConfig load_run_config(const std::filesystem::path& path);

/// Complete, normalised JSON with every field spelled out.
std::string dump_run_config(const RunConfig& cfg);

}  // namespace smdt::app
