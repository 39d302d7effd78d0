#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "smdt/data.hpp"
#include "smdt/errors.hpp"
#include "smdt/model.hpp"

using namespace smdt;

namespace {

ModelConfig tiny_config(Strategy s) {
  ModelConfig cfg;
  cfg.frames = 4;
  cfg.height = 16;
  cfg.width = 16;
  cfg.embed_dim = 4;
  cfg.stages = {{4, 1, 1, 1, 2}, {8, 1, 2, 2, 1}};
  cfg.mlp_ratio = 1;
  cfg.d_out = 6;
  cfg.num_classes = 3;
  cfg.strategy = s;
  return cfg;
}

ad::Tensor<float> random_clip(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  ad::Tensor<float> clip({cfg.channels, cfg.frames, cfg.height, cfg.width});
  for (float& v : clip.data) v = u(rng);
  return clip;
}

GroundTruth two_boxes() {
  GroundTruth gt;
  gt.boxes = {Box(0.3, 0.3, 0.3, 0.2), Box(0.7, 0.6, 0.2, 0.4)};
  gt.labels = {{1, 0, 1}, {0, 1, 0}};
  return gt;
}

}  // namespace

TEST(ModelConfig, ToyShapes) {
  ModelConfig cfg;
  EXPECT_EQ(cfg.patch_grid(), (GridDims{4, 8, 8}));
  EXPECT_EQ(cfg.output_grid(), (GridDims{4, 8, 8}));
  cfg.remove_last_pool = false;
  EXPECT_EQ(cfg.output_grid(), (GridDims{4, 4, 4}));
}

TEST(ModelConfig, PaperScaleShapeCheck) {
  ModelConfig cfg;
  cfg.frames = 16;
  cfg.height = 256;
  cfg.width = 256;
  cfg.stages = {{96, 1, 1, 1, 4}, {192, 2, 2, 2, 2}, {384, 11, 4, 2, 1}, {768, 2, 8, 2, 1}};
  cfg.remove_last_pool = true;
  EXPECT_EQ(cfg.output_grid(), (GridDims{8, 16, 16}));
  cfg.strategy = Strategy::TwoCT;
  EXPECT_EQ(cfg.token_count(), 512u);
  cfg.remove_last_pool = false;
  EXPECT_EQ(cfg.output_grid(), (GridDims{8, 8, 8}));
}

TEST(ModelConfig, TokenCountTable) {
  struct Row {
    std::size_t frames, size;
    bool remove;
    Strategy s;
    std::size_t expected;
  };
  const Row rows[] = {
      {8, 32, true, Strategy::Singletons, 256}, {8, 32, false, Strategy::Singletons, 64},
      {8, 32, true, Strategy::TwoCT, 128},      {8, 32, false, Strategy::TwoCT, 32},
      {4, 64, true, Strategy::Tubelets, 256},   {16, 32, false, Strategy::CT, 16},
  };
  for (const Row& r : rows) {
    ModelConfig cfg;
    cfg.frames = r.frames;
    cfg.height = cfg.width = r.size;
    cfg.remove_last_pool = r.remove;
    cfg.strategy = r.s;
    cfg.validate();
    EXPECT_EQ(cfg.token_count(), r.expected);
    EXPECT_EQ(Model(cfg, 1).predict(random_clip(cfg, 2)).size(), r.expected);
  }
}

TEST(ModelConfig, RejectsIndivisibleDims) {
  ModelConfig cfg;
  cfg.height = 30;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.frames = 7;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.num_classes = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.frames = 6;  // three output frames cannot be split into halves
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Model, PatchifyShapes) {
  ModelConfig cfg;
  Model m(cfg, 1);
  const TokenVolume v = m.patchify(random_clip(cfg, 1));
  EXPECT_EQ(v.data.shape, (ad::Shape{4, 8, 8, cfg.embed_dim}));

  cfg.patch_t = 1;
  cfg.patch_xy = 1;
  cfg.stages = {{16, 1, 1, 1, 1}};
  Model unit(cfg, 1);
  EXPECT_EQ(unit.patchify(random_clip(cfg, 1)).data.shape, (ad::Shape{8, 32, 32, cfg.embed_dim}));
}

TEST(Model, MeanClipGivesZeroTokens) {
  ModelConfig cfg;
  Model m(cfg, 3);
  const ad::Tensor<float> flat({3, 8, 32, 32}, static_cast<float>(cfg.pixel_mean));
  for (double v : m.patchify(flat).data.data) EXPECT_EQ(v, 0.0);
  cfg.pixel_std = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Model, ForwardShapes) {
  ModelConfig cfg;
  EXPECT_EQ(Model(cfg, 1).forward(random_clip(cfg, 1)).data.shape, (ad::Shape{4, 8, 8, 64}));
  cfg.remove_last_pool = false;
  EXPECT_EQ(Model(cfg, 1).forward(random_clip(cfg, 1)).data.shape, (ad::Shape{4, 4, 4, 64}));
}

TEST(Model, ZeroHeadsGiveCellCentresAndUniformActor) {
  ModelConfig cfg;
  cfg.strategy = Strategy::CT;
  Model m(cfg, 4);
  for (const char* name : {"head.box.fc2.weight", "head.box.fc2.bias", "head.actor.weight", "head.actor.bias"}) {
    for (float& v : m.parameters().at(name).data) v = 0.0f;
  }
  const HeadOutputs out = m.predict(random_clip(cfg, 5));
  ASSERT_EQ(out.size(), 64u);
  const PredictionSet p = out.to_prediction_set();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const GridIndex g = out.grid_index[i];
    EXPECT_NEAR(out.boxes[i].cx(), (g.col + 0.5) / 8.0, 1e-6);
    EXPECT_NEAR(out.boxes[i].cy(), (g.row + 0.5) / 8.0, 1e-6);
    EXPECT_NEAR(out.boxes[i].h(), 1.0 / 8.0, 1e-6);
    EXPECT_NEAR(out.boxes[i].w(), 1.0 / 8.0, 1e-6);
    EXPECT_NEAR(p.actor_probs[i][0], 0.5, 1e-12);
  }
}

TEST(Model, ActorPriorAtInit) {
  ModelConfig cfg;
  const PredictionSet p = Model(cfg, 9).predict(random_clip(cfg, 9)).to_prediction_set();
  for (const auto& a : p.actor_probs) EXPECT_NEAR(a[0], 0.01, 0.005);
}

TEST(Model, MaxPoolClassMatchesOracle) {
  ModelConfig cfg = tiny_config(Strategy::MaxPoolClass);
  Model m(cfg, 2);
  const auto clip = random_clip(cfg, 3);
  const HeadOutputs out = m.predict(clip);
  const TokenVolume v = m.forward(clip);
  // Class logits of every token, computed through the singleton path.
  SelectedTokens all = select_singletons(v);
  const HeadOutputs each = m.heads(all, v.h(), v.w());
  const std::size_t cells = v.h() * v.w(), C = cfg.num_classes;
  ASSERT_EQ(out.size(), cells);
  for (std::size_t cell = 0; cell < cells; ++cell) {
    for (std::size_t c = 0; c < C; ++c) {
      double best = -INFINITY;
      for (std::size_t f = 0; f < v.t(); ++f) best = std::max(best, each.class_logits[(f * cells + cell) * C + c]);
      EXPECT_NEAR(out.class_logits[cell * C + c], best, 1e-6);
    }
  }
}

TEST(Model, HeadsArePerToken) {
  ModelConfig cfg = tiny_config(Strategy::Singletons);
  Model m(cfg, 6);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  SelectedTokens sel;
  sel.count = 5;
  sel.actor_stream = ad::Tensor<double>({5, cfg.d_out});
  sel.action_stream = ad::Tensor<double>({5, cfg.d_out});
  for (double& v : sel.actor_stream.data) v = n(rng);
  for (double& v : sel.action_stream.data) v = n(rng);
  sel.grid_index.assign(5, GridIndex{});
  const std::size_t perm[] = {3, 0, 4, 1, 2};
  SelectedTokens permuted = sel;
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t k = 0; k < cfg.d_out; ++k) {
      permuted.actor_stream[i * cfg.d_out + k] = sel.actor_stream[perm[i] * cfg.d_out + k];
      permuted.action_stream[i * cfg.d_out + k] = sel.action_stream[perm[i] * cfg.d_out + k];
    }
  }
  const HeadOutputs a = m.heads(sel, 1, 1), b = m.heads(permuted, 1, 1);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(b.boxes[i], a.boxes[perm[i]]);
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      EXPECT_EQ(b.class_logits[i * cfg.num_classes + c], a.class_logits[perm[i] * cfg.num_classes + c]);
    }
    EXPECT_EQ(b.actor_logits[2 * i], a.actor_logits[2 * perm[i]]);
  }
}

TEST(Model, ForwardIsDeterministic) {
  ModelConfig cfg;
  const auto clip = random_clip(cfg, 1);
  const HeadOutputs a = Model(cfg, 3).predict(clip), b = Model(cfg, 3).predict(clip);
  EXPECT_EQ(a.actor_logits.data, b.actor_logits.data);
  EXPECT_EQ(a.class_logits.data, b.class_logits.data);
}

class EndToEndGradient : public ::testing::TestWithParam<Strategy> {};

TEST_P(EndToEndGradient, FrozenAssignmentMatchesFiniteDifferences) {
  ModelConfig cfg = tiny_config(GetParam());
  // At the training init scale attention is almost uniform and its weight
  // gradients sit near 1e-10; a wider init exercises every parameter.
  cfg.init_std = 0.3;
  const GroundTruth gt = two_boxes();
  TrainOptions opts;
  // Central differences of an O(5) loss in double carry ~1e-10 of round-off
  // (a few ulp over 2 eps), so entries below 1e-5 are compared absolutely.
  ad::GradCheckOptions check;
  check.floor = 1e-5;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ParameterSet<double> params = init_parameters(cfg, 11 + seed).cast<double>();
    const ad::Tensor<double> clip = random_clip(cfg, 100 + seed).cast<double>();
    Assignment frozen;
    {
      ad::Tape<double> tape;
      clip_loss(tape, bind_parameters(tape, params, false), cfg, clip, gt, opts, nullptr, &frozen);
    }
    auto fn = [&](ad::Tape<double>& tape, std::span<const ad::Var<double>> x) {
      ParamVars<double> p;
      p.source = &params;
      p.vars.assign(x.begin(), x.end());
      return clip_loss(tape, p, cfg, clip, gt, opts, &frozen).total;
    };
    const auto report = ad::grad_check(fn, params.tensors, check);
    EXPECT_LT(report.max_relative_error, 1e-4)
        << "seed " << seed << " " << params.names[report.worst_parameter] << "[" << report.worst_index
        << "] analytic " << report.analytic << " numeric " << report.numeric;
  }
}

INSTANTIATE_TEST_SUITE_P(Strategies, EndToEndGradient,
                         ::testing::Values(Strategy::Singletons, Strategy::Tubelets, Strategy::CT,
                                           Strategy::MaxPoolClass, Strategy::TwoCT),
                         [](const auto& info) { return std::string(strategy_name(info.param)); });

TEST(Optimizer, CosineSchedule) {
  OptimizerConfig cfg;
  cfg.lr = 1.0;
  cfg.warmup_steps = 4;
  cfg.total_steps = 14;
  cfg.min_lr = 0.1;
  EXPECT_DOUBLE_EQ(cosine_lr(cfg, 0), 0.25);
  EXPECT_DOUBLE_EQ(cosine_lr(cfg, 3), 1.0);
  EXPECT_DOUBLE_EQ(cosine_lr(cfg, 4), 1.0);
  EXPECT_NEAR(cosine_lr(cfg, 9), 0.55, 1e-12);
  EXPECT_NEAR(cosine_lr(cfg, 14), 0.1, 1e-12);
  EXPECT_NEAR(cosine_lr(cfg, 100), 0.1, 1e-12);
}

TEST(Optimizer, AdamWFirstStepAndDecay) {
  OptimizerConfig cfg;
  cfg.weight_decay = 0.5;
  AdamW opt(cfg);
  ParameterSet<float> p;
  p.add("w", ad::Tensor<float>({1, 2}, {1.0f, -1.0f}));
  p.add("b", ad::Tensor<float>({2}, {1.0f, -1.0f}));
  ParameterSet<float> g = p.zeros_like();
  g.tensors[0].data = {2.0f, 0.0f};
  g.tensors[1].data = {-3.0f, 0.0f};
  opt.step(p, g, 0.1);
  // First Adam step moves by lr * sign(g); decay only touches the matrix.
  EXPECT_NEAR(p.tensors[0][0], 1.0 - 0.05 - 0.1, 1e-6);
  EXPECT_NEAR(p.tensors[0][1], -1.0 + 0.05, 1e-6);
  EXPECT_NEAR(p.tensors[1][0], 1.1, 1e-6);
  EXPECT_NEAR(p.tensors[1][1], -1.0, 1e-6);
}

TEST(Optimizer, ConfigValidation) {
  OptimizerConfig cfg;
  cfg.lr = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = OptimizerConfig{};
  cfg.min_lr = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Trainer, DeterministicAcrossRunsAndThreads) {
  ModelConfig cfg = tiny_config(Strategy::TwoCT);
  std::vector<TrainSample> batch;
  for (int k = 0; k < 3; ++k) batch.push_back({random_clip(cfg, 20 + k), two_boxes()});
  OptimizerConfig oc;
  oc.lr = 1e-3;
  oc.total_steps = 10;
  std::vector<double> runs[3];
  const std::size_t threads[] = {1, 1, 3};
  for (int r = 0; r < 3; ++r) {
    Model m(cfg, 5);
    TrainOptions to;
    to.threads = threads[r];
    Trainer tr(m, oc, to);
    for (int s = 0; s < 4; ++s) runs[r].push_back(tr.step(batch).loss.total);
  }
  EXPECT_EQ(runs[0], runs[1]);
  EXPECT_EQ(runs[0], runs[2]);
  EXPECT_LT(runs[0].back(), runs[0].front());
}

TEST(Trainer, NonFiniteLossAbortsWithoutUpdate) {
  ModelConfig cfg = tiny_config(Strategy::CT);
  Model m(cfg, 5);
  const ParameterSet<float> before = m.parameters();
  ad::Tensor<float> clip = random_clip(cfg, 1);
  clip[0] = std::numeric_limits<float>::quiet_NaN();
  std::vector<TrainSample> batch{{clip, two_boxes()}};
  Trainer tr(m, OptimizerConfig{}, TrainOptions{{}, {}, 1});
  EXPECT_THROW(tr.step(batch), std::exception);
  EXPECT_EQ(m.parameters().tensors, before.tensors);
}

TEST(Trainer, ThreadCountFromEnvironment) {
  ::setenv("SMDT_THREADS", "3", 1);
  EXPECT_EQ(default_thread_count(), 3u);
  ::setenv("SMDT_THREADS", "0", 1);
  EXPECT_GE(default_thread_count(), 1u);
  ::unsetenv("SMDT_THREADS");
}

TEST(Parameters, CheckRejectsMismatch) {
  ModelConfig cfg;
  ParameterSet<float> p = init_parameters(cfg, 1);
  EXPECT_NO_THROW(check_parameters(cfg, p));
  ModelConfig other = cfg;
  other.d_out = 32;
  EXPECT_THROW(check_parameters(other, p), ConfigError);
  EXPECT_THROW(Model(other, p), ConfigError);
}
