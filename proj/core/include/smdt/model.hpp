#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "smdt/assignment.hpp"
#include "smdt/autodiff.hpp"
#include "smdt/criterion.hpp"
#include "smdt/token_selection.hpp"

namespace smdt {

struct StageConfig {
  std::size_t width = 16;
  std::size_t depth = 1;
  std::size_t heads = 1;
  /// Spatial pooling factor applied on entry (1 or 2).
  std::size_t stride = 1;
  /// Spatial pooling factor for keys and values inside attention.
  std::size_t kv_stride = 1;
};

struct GridDims {
  std::size_t t = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  friend bool operator==(const GridDims&, const GridDims&) = default;
};

struct ModelConfig {
  std::size_t channels = 3;
  std::size_t frames = 8;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t patch_t = 2;
  std::size_t patch_xy = 4;
  /// Cube embedding kernel; larger than the stride means overlapping cubes,
  /// zero padded (in normalised pixel space) around the clip.
  std::size_t patch_kernel_t = 3;
  std::size_t patch_kernel_xy = 7;
  std::size_t embed_dim = 16;
  std::vector<StageConfig> stages = {{16, 1, 1, 1, 2}, {32, 1, 2, 1, 2}, {64, 1, 4, 2, 1}};
  /// Drops the last spatial pooling so the output grid stays finer.
  bool remove_last_pool = true;
  std::size_t mlp_ratio = 2;
  std::size_t d_out = 64;
  std::size_t num_classes = 8;
  Strategy strategy = Strategy::TwoCT;
  /// Initial p(actor) of every token.
  double actor_prior = 0.01;
  double init_std = 0.02;
  /// Pixels enter the patch embedding as (x - pixel_mean) / pixel_std.
  double pixel_mean = 0.5;
  double pixel_std = 0.25;

  /// Throws ConfigError on indivisible dims or empty stages.
  void validate() const;
  GridDims patch_grid() const;
  GridDims output_grid() const;
  std::size_t token_count() const;
};

/// Ordered, named tensors. Order is fixed by the model and checkpoint files.
template <typename T>
struct ParameterSet {
  std::vector<std::string> names;
  std::vector<ad::Tensor<T>> tensors;

  std::size_t size() const { return tensors.size(); }
  /// Throws InputError for unknown names.
  std::size_t index(const std::string& name) const;
  ad::Tensor<T>& at(const std::string& name) { return tensors[index(name)]; }
  const ad::Tensor<T>& at(const std::string& name) const { return tensors[index(name)]; }
  void add(std::string name, ad::Tensor<T> value);
  std::size_t scalar_count() const;
  /// Same names and shapes, zero values.
  ParameterSet zeros_like() const;

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    out.names = names;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }
};

/// Truncated-normal weights, zero biases, unit norm gains.
ParameterSet<float> init_parameters(const ModelConfig& cfg, std::uint64_t seed);
/// Throws ConfigError when names or shapes differ from what `cfg` builds.
void check_parameters(const ModelConfig& cfg, const ParameterSet<float>& params);

/// Leaves (or constants) for every parameter, in ParameterSet order.
template <typename T>
struct ParamVars {
  const ParameterSet<T>* source = nullptr;
  std::vector<ad::Var<T>> vars;
  const ad::Var<T>& operator()(const std::string& name) const { return vars[source->index(name)]; }
};

template <typename T>
ParamVars<T> bind_parameters(ad::Tape<T>& tape, const ParameterSet<T>& params, bool trainable);

/// [L,4] boxes after bias and sigmoid, [L,2] actor logits, [L,C] class logits.
template <typename T>
struct HeadVars {
  ad::Var<T> boxes;
  ad::Var<T> actor_logits;
  ad::Var<T> class_logits;
  std::vector<GridIndex> grid_index;
};

/// Clip [channels, frames, height, width] -> token volume [t, h, w, embed_dim].
template <typename T>
ad::Var<T> patchify(ad::Tape<T>& tape, const ParamVars<T>& p, const ModelConfig& cfg,
                    const ad::Tensor<T>& clip);
/// Full backbone -> [t, h, w, d_out].
template <typename T>
ad::Var<T> backbone(ad::Tape<T>& tape, const ParamVars<T>& p, const ModelConfig& cfg,
                    const ad::Tensor<T>& clip);
template <typename T>
HeadVars<T> heads(ad::Tape<T>& tape, const ParamVars<T>& p, const ModelConfig& cfg,
                  const SelectedVars<T>& sel, std::size_t grid_h, std::size_t grid_w);
template <typename T>
HeadVars<T> forward(ad::Tape<T>& tape, const ParamVars<T>& p, const ModelConfig& cfg,
                    const ad::Tensor<T>& clip);

/// Plain-valued head outputs for inference and evaluation.
struct HeadOutputs {
  std::vector<Box> boxes;
  ad::Tensor<double> actor_logits;  // [L, 2]
  ad::Tensor<double> class_logits;  // [L, C]
  std::vector<GridIndex> grid_index;

  std::size_t size() const { return boxes.size(); }
  /// softmax over actor logits, sigmoid over class logits.
  PredictionSet to_prediction_set() const;
};

template <typename T>
HeadOutputs to_head_outputs(const HeadVars<T>& vars);

/// Inference-side wrapper holding a configuration and float weights.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);
  Model(ModelConfig cfg, ParameterSet<float> params);

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<float>& parameters() { return params_; }
  const ParameterSet<float>& parameters() const { return params_; }

  TokenVolume patchify(const ad::Tensor<float>& clip) const;
  TokenVolume forward(const ad::Tensor<float>& clip) const;
  /// Heads on an explicit selection (strategy must not be MaxPoolClass).
  HeadOutputs heads(const SelectedTokens& sel, std::size_t grid_h, std::size_t grid_w) const;
  /// Clip -> head outputs using the configured strategy.
  HeadOutputs predict(const ad::Tensor<float>& clip) const;

 private:
  ModelConfig cfg_;
  ParameterSet<float> params_;
};

// ---------------------------------------------------------------------------
// Training.

struct OptimizerConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup_steps = 0;
  /// Length of the cosine schedule; the rate reaches min_lr at this step.
  std::size_t total_steps = 1;
  double min_lr = 0.0;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;

  void validate() const;
};

/// Linear warmup then cosine decay without restarts.
double cosine_lr(const OptimizerConfig& cfg, std::size_t step);

/// Adam with decoupled weight decay, applied to rank >= 2 tensors only.
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg) : cfg_(std::move(cfg)) {}
  void step(ParameterSet<float>& params, const ParameterSet<float>& grads, double lr);
  std::size_t steps_taken() const { return t_; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  ParameterSet<float> m_, v_;
  std::size_t t_ = 0;
};

struct TrainSample {
  ad::Tensor<float> clip;
  GroundTruth gt;
};

struct TrainOptions {
  CriterionOptions criterion;
  MatchingOptions matching;
  /// Worker threads for per-clip forward/backward; 0 reads SMDT_THREADS.
  std::size_t threads = 0;
};

/// Forward, match (assignment frozen) and loss for one clip.
template <typename T>
LossVar<T> clip_loss(ad::Tape<T>& tape, const ParamVars<T>& p, const ModelConfig& cfg,
                     const ad::Tensor<T>& clip, const GroundTruth& gt, const TrainOptions& opts,
                     const Assignment* frozen = nullptr, Assignment* used = nullptr);

struct StepReport {
  LossBreakdown loss;  // averaged over the batch
  double lr = 0.0;
  double grad_norm = 0.0;
};

class Trainer {
 public:
  Trainer(Model& model, OptimizerConfig opt, TrainOptions opts);

  /// One optimisation step on a batch. Throws NumericError on a non-finite
  /// loss or gradient, leaving the parameters untouched.
  StepReport step(std::span<const TrainSample> batch);
  std::size_t steps_taken() const { return optimizer_.steps_taken(); }

 private:
  Model& model_;
  AdamW optimizer_;
  TrainOptions opts_;
  std::size_t threads_;
};

/// SMDT_THREADS when set and positive, else hardware concurrency (>= 1).
std::size_t default_thread_count();

}  // namespace smdt
