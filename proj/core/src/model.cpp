#include "smdt/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <random>
#include <thread>

#include "smdt/errors.hpp"

namespace smdt {

using ad::Shape;
using ad::Tensor;
using ad::Var;

// ---------------------------------------------------------------------------
// Configuration.

namespace {

// Index of the stage whose pooling remove_last_pool drops, or stages.size().
std::size_t last_pooling_stage(const ModelConfig& cfg) {
  for (std::size_t s = cfg.stages.size(); s-- > 0;) {
    if (cfg.stages[s].stride > 1) return s;
  }
  return cfg.stages.size();
}

std::size_t effective_stride(const ModelConfig& cfg, std::size_t s) {
  if (cfg.remove_last_pool && s == last_pooling_stage(cfg)) return 1;
  return cfg.stages[s].stride;
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (channels == 0 || frames == 0 || height == 0 || width == 0) fail("input dims must be >= 1");
  if (patch_t == 0 || patch_xy == 0) fail("patch strides must be >= 1");
  if (patch_kernel_t < patch_t || patch_kernel_xy < patch_xy) fail("patch kernel must be >= the patch stride");
  if (frames % patch_t != 0) fail("frames not divisible by the temporal patch stride");
  if (height % patch_xy != 0 || width % patch_xy != 0) fail("height/width not divisible by the patch stride");
  if (embed_dim == 0 || d_out == 0 || mlp_ratio == 0) fail("widths must be >= 1");
  if (num_classes == 0) fail("num_classes must be >= 1");
  if (stages.empty()) fail("at least one stage is required");
  if (!(actor_prior > 0.0 && actor_prior < 1.0)) fail("actor_prior must lie in (0, 1)");
  if (!(init_std > 0.0)) fail("init_std must be positive");
  if (!std::isfinite(pixel_mean) || !(pixel_std > 0.0) || !std::isfinite(pixel_std)) {
    fail("pixel_std must be positive and pixel_mean finite");
  }
  std::size_t h = height / patch_xy, w = width / patch_xy;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const StageConfig& st = stages[s];
    const std::string tag = "stage " + std::to_string(s) + ": ";
    if (st.width == 0 || st.depth == 0 || st.heads == 0) fail(tag + "width, depth and heads must be >= 1");
    if (st.width % st.heads != 0) fail(tag + "width not divisible by heads");
    if (st.stride != 1 && st.stride != 2) fail(tag + "stride must be 1 or 2");
    if (st.kv_stride == 0) fail(tag + "kv_stride must be >= 1");
    const std::size_t stride = effective_stride(*this, s);
    if (h % stride != 0 || w % stride != 0) fail(tag + "grid not divisible by the stage stride");
    h /= stride;
    w /= stride;
    if (h % st.kv_stride != 0 || w % st.kv_stride != 0) fail(tag + "grid not divisible by kv_stride");
  }
  if (strategy == Strategy::TwoCT && (frames / patch_t) % 2 != 0) {
    fail("two_ct needs an even number of output frames");
  }
}

GridDims ModelConfig::patch_grid() const {
  return {frames / patch_t, height / patch_xy, width / patch_xy};
}

GridDims ModelConfig::output_grid() const {
  GridDims g = patch_grid();
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::size_t stride = effective_stride(*this, s);
    g.h /= stride;
    g.w /= stride;
  }
  return g;
}

std::size_t ModelConfig::token_count() const {
  const GridDims g = output_grid();
  return selected_count(strategy, g.t, g.h, g.w);
}

// ---------------------------------------------------------------------------
// Parameters.

template <typename T>
std::size_t ParameterSet<T>::index(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return i;
  }
  throw InputError("unknown parameter '" + name + "'");
}

template <typename T>
void ParameterSet<T>::add(std::string name, Tensor<T> value) {
  names.push_back(std::move(name));
  tensors.push_back(std::move(value));
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

template <typename T>
ParameterSet<T> ParameterSet<T>::zeros_like() const {
  ParameterSet<T> out;
  out.names = names;
  for (const auto& t : tensors) out.tensors.emplace_back(t.shape);
  return out;
}

template struct ParameterSet<float>;
template struct ParameterSet<double>;

namespace {

enum class Init { Weight, Zero, One };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
};

std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg) {
  std::vector<ParamSpec> out;
  auto linear = [&](const std::string& prefix, std::size_t in, std::size_t outw) {
    out.push_back({prefix + ".weight", {in, outw}, Init::Weight});
    out.push_back({prefix + ".bias", {outw}, Init::Zero});
  };
  auto norm = [&](const std::string& prefix, std::size_t d) {
    out.push_back({prefix + ".gain", {d}, Init::One});
    out.push_back({prefix + ".shift", {d}, Init::Zero});
  };
  const GridDims pg = cfg.patch_grid();
  linear("patch", cfg.channels * cfg.patch_kernel_t * cfg.patch_kernel_xy * cfg.patch_kernel_xy, cfg.embed_dim);
  out.push_back({"pos_embed", {pg.t, pg.h, pg.w, cfg.embed_dim}, Init::Weight});
  std::size_t d = cfg.embed_dim;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const StageConfig& st = cfg.stages[s];
    const std::string sp = "stage" + std::to_string(s);
    if (st.width != d) linear(sp + ".proj", d, st.width);
    d = st.width;
    for (std::size_t b = 0; b < st.depth; ++b) {
      const std::string bp = sp + ".block" + std::to_string(b);
      norm(bp + ".norm1", d);
      linear(bp + ".attn.q", d, d);
      // Keys carry no bias: it shifts every score of a query equally.
      out.push_back({bp + ".attn.k.weight", {d, d}, Init::Weight});
      linear(bp + ".attn.v", d, d);
      linear(bp + ".attn.out", d, d);
      norm(bp + ".norm2", d);
      linear(bp + ".mlp.fc1", d, cfg.mlp_ratio * d);
      linear(bp + ".mlp.fc2", cfg.mlp_ratio * d, d);
    }
  }
  norm("final.norm", d);
  linear("final.proj", d, cfg.d_out);
  linear("head.box.fc1", cfg.d_out, cfg.d_out);
  linear("head.box.fc2", cfg.d_out, 4);
  linear("head.actor", cfg.d_out, 2);
  linear("head.class.fc1", cfg.d_out, cfg.d_out);
  linear("head.class.fc2", cfg.d_out, cfg.num_classes);
  return out;
}

}  // namespace

ParameterSet<float> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ParameterSet<float> out;
  for (const ParamSpec& spec : parameter_layout(cfg)) {
    Tensor<float> t(spec.shape);
    for (float& v : t.data) {
      switch (spec.init) {
        case Init::Zero: v = 0.0f; break;
        case Init::One: v = 1.0f; break;
        case Init::Weight: {
          double z = normal(rng);
          while (std::abs(z) > 2.0) z = normal(rng);
          v = static_cast<float>(z * cfg.init_std);
          break;
        }
      }
    }
    out.add(spec.name, std::move(t));
  }
  // Start every token close to the no-actor class.
  out.at("head.actor.bias")[1] =
      static_cast<float>(std::log((1.0 - cfg.actor_prior) / cfg.actor_prior));
  return out;
}

void check_parameters(const ModelConfig& cfg, const ParameterSet<float>& params) {
  const auto layout = parameter_layout(cfg);
  if (layout.size() != params.size()) {
    throw ConfigError("parameter count " + std::to_string(params.size()) + " does not match the model (" +
                      std::to_string(layout.size()) + ")");
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].name != params.names[i] || layout[i].shape != params.tensors[i].shape) {
      throw ConfigError("parameter '" + params.names[i] + "' " + ad::to_string(params.tensors[i].shape) +
                        " does not match expected '" + layout[i].name + "' " +
                        ad::to_string(layout[i].shape));
    }
  }
}

template <typename T>
ParamVars<T> bind_parameters(ad::Tape<T>& tape, const ParameterSet<T>& params, bool trainable) {
  ParamVars<T> out;
  out.source = &params;
  out.vars.reserve(params.size());
  for (const auto& t : params.tensors) out.vars.push_back(trainable ? tape.leaf(t) : tape.constant(t));
  return out;
}

// ---------------------------------------------------------------------------
// Forward pass.

namespace {

template <typename T>
Var<T> linear(const Var<T>& x, const ParamVars<T>& p, const std::string& prefix) {
  return ad::add(ad::matmul(x, p(prefix + ".weight")), p(prefix + ".bias"));
}

template <typename T>
Var<T> norm(const Var<T>& x, const ParamVars<T>& p, const std::string& prefix) {
  return ad::layer_norm(x, p(prefix + ".gain"), p(prefix + ".shift"));
}

// Average pooling over non-overlapping factor x factor windows of [t,h,w,d].
template <typename T>
Var<T> spatial_pool(const Var<T>& x, std::size_t factor) {
  if (factor == 1) return x;
  const Shape s = x.shape();
  Var<T> y = ad::reshape(x, Shape{s[0], s[1] / factor, factor, s[2] / factor, factor, s[3]});
  return ad::mean(ad::mean(y, 4), 2);
}

// [L, d] -> [heads, L, d / heads]
template <typename T>
Var<T> split_heads(const Var<T>& x, std::size_t heads) {
  const Shape s = x.shape();
  static constexpr std::size_t kOrder[] = {1, 0, 2};
  return ad::permute(ad::reshape(x, Shape{s[0], heads, s[1] / heads}), std::span<const std::size_t>(kOrder));
}

template <typename T>
Var<T> attention_block(const Var<T>& x, const ParamVars<T>& p, const std::string& prefix,
                       const StageConfig& st) {
  const Shape s = x.shape();  // [t, h, w, d]
  const std::size_t d = s[3];
  const std::size_t tokens = s[0] * s[1] * s[2];

  Var<T> n = norm(x, p, prefix + ".norm1");
  Var<T> q = ad::reshape(linear(n, p, prefix + ".attn.q"), Shape{tokens, d});
  // Keys and values come from a spatially pooled copy of the sequence.
  Var<T> pooled = spatial_pool(n, st.kv_stride);
  const std::size_t kv_tokens = ad::numel(pooled.shape()) / d;
  Var<T> k = ad::reshape(ad::matmul(pooled, p(prefix + ".attn.k.weight")), Shape{kv_tokens, d});
  Var<T> v = ad::reshape(linear(pooled, p, prefix + ".attn.v"), Shape{kv_tokens, d});

  Var<T> a = ad::scaled_dot_product_attention(split_heads(q, st.heads), split_heads(k, st.heads),
                                               split_heads(v, st.heads));
  static constexpr std::size_t kOrder[] = {1, 0, 2};
  a = ad::reshape(ad::permute(a, std::span<const std::size_t>(kOrder)), s);
  Var<T> y = ad::add(x, linear(a, p, prefix + ".attn.out"));

  Var<T> m = linear(ad::gelu(linear(norm(y, p, prefix + ".norm2"), p, prefix + ".mlp.fc1")), p,
                    prefix + ".mlp.fc2");
  return ad::add(y, m);
}

template <typename T>
Tensor<T> cubes(const ModelConfig& cfg, const Tensor<T>& clip) {
  const Shape expected{cfg.channels, cfg.frames, cfg.height, cfg.width};
  if (clip.shape != expected) {
    throw InputError("clip shape " + ad::to_string(clip.shape) + " does not match config " +
                     ad::to_string(expected));
  }
  const GridDims g = cfg.patch_grid();
  const std::size_t kt = cfg.patch_kernel_t, kx = cfg.patch_kernel_xy;
  // Window origin of cube i along an axis: i * stride - (kernel - stride) / 2.
  const long off_t = static_cast<long>((kt - cfg.patch_t) / 2), off_x = static_cast<long>((kx - cfg.patch_xy) / 2);
  const std::size_t feat = cfg.channels * kt * kx * kx;
  const T mean = static_cast<T>(cfg.pixel_mean), inv_std = static_cast<T>(1.0 / cfg.pixel_std);
  const long frames = static_cast<long>(cfg.frames), height = static_cast<long>(cfg.height),
             width = static_cast<long>(cfg.width);
  Tensor<T> out({g.t * g.h * g.w, feat});
  std::size_t i = 0;
  for (std::size_t tt = 0; tt < g.t; ++tt) {
    for (std::size_t r = 0; r < g.h; ++r) {
      for (std::size_t c = 0; c < g.w; ++c) {
        for (std::size_t ch = 0; ch < cfg.channels; ++ch) {
          for (std::size_t dt = 0; dt < kt; ++dt) {
            const long f = static_cast<long>(tt * cfg.patch_t + dt) - off_t;
            for (std::size_t dy = 0; dy < kx; ++dy) {
              const long y = static_cast<long>(r * cfg.patch_xy + dy) - off_x;
              for (std::size_t dx = 0; dx < kx; ++dx, ++i) {
                const long x = static_cast<long>(c * cfg.patch_xy + dx) - off_x;
                if (f < 0 || f >= frames || y < 0 || y >= height || x < 0 || x >= width) continue;
                const std::size_t at = ((ch * cfg.frames + static_cast<std::size_t>(f)) * cfg.height +
                                        static_cast<std::size_t>(y)) * cfg.width + static_cast<std::size_t>(x);
                out[i] = (clip[at] - mean) * inv_std;
              }
            }
          }
        }
      }
    }
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> patchify(ad::Tape<T>& tape, const ParamVars<T>& p, const ModelConfig& cfg, const Tensor<T>& clip) {
  const GridDims g = cfg.patch_grid();
  Var<T> tokens = linear(tape.constant(cubes(cfg, clip)), p, "patch");
  return ad::reshape(tokens, Shape{g.t, g.h, g.w, cfg.embed_dim});
}

template <typename T>
Var<T> backbone(ad::Tape<T>& tape, const ParamVars<T>& p, const ModelConfig& cfg, const Tensor<T>& clip) {
  Var<T> x = ad::add(patchify(tape, p, cfg, clip), p("pos_embed"));
  std::size_t d = cfg.embed_dim;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const StageConfig& st = cfg.stages[s];
    const std::string sp = "stage" + std::to_string(s);
    if (st.width != d) x = linear(x, p, sp + ".proj");
    d = st.width;
    x = spatial_pool(x, effective_stride(cfg, s));
    for (std::size_t b = 0; b < st.depth; ++b) {
      x = attention_block(x, p, sp + ".block" + std::to_string(b), st);
    }
  }
  return linear(norm(x, p, "final.norm"), p, "final.proj");
}

template <typename T>
HeadVars<T> heads(ad::Tape<T>& tape, const ParamVars<T>& p, const ModelConfig& cfg,
                  const SelectedVars<T>& sel, std::size_t grid_h, std::size_t grid_w) {
  const std::size_t L = sel.actor.shape().at(0);
  if (!sel.pool_class_over_time && sel.action.shape().at(0) != L) {
    throw InputError("heads: actor and action streams are not aligned");
  }
  if (L % (grid_h * grid_w) != 0) throw InputError("heads: token count not a multiple of the grid");
  HeadVars<T> out;
  out.grid_index = sel.grid_index;

  const Tensor<T> bias = box_bias(grid_h, grid_w, L / (grid_h * grid_w)).template cast<T>();
  Var<T> box_logits = linear(ad::gelu(linear(sel.actor, p, "head.box.fc1")), p, "head.box.fc2");
  out.boxes = ad::sigmoid(ad::add(box_logits, tape.constant(bias)));
  out.actor_logits = linear(sel.actor, p, "head.actor");
  Var<T> cls = linear(ad::gelu(linear(sel.action, p, "head.class.fc1")), p, "head.class.fc2");
  if (sel.pool_class_over_time) cls = pool_class_logits(cls, sel.frames);
  if (cls.shape() != Shape{L, cfg.num_classes}) {
    throw InputError("heads: class logits " + ad::to_string(cls.shape()) + " not aligned with " +
                     std::to_string(L) + " actor tokens");
  }
  out.class_logits = cls;
  return out;
}

template <typename T>
HeadVars<T> forward(ad::Tape<T>& tape, const ParamVars<T>& p, const ModelConfig& cfg, const Tensor<T>& clip) {
  Var<T> volume = backbone(tape, p, cfg, clip);
  const Shape& s = volume.shape();
  return heads(tape, p, cfg, select_tokens(volume, cfg.strategy), s[1], s[2]);
}

PredictionSet HeadOutputs::to_prediction_set() const {
  PredictionSet out;
  out.boxes = boxes;
  const std::size_t L = boxes.size();
  const std::size_t C = L ? class_logits.size() / L : 0;
  out.actor_probs.resize(L);
  out.class_probs.assign(L, std::vector<double>(C));
  for (std::size_t i = 0; i < L; ++i) {
    const double a = actor_logits[2 * i], e = actor_logits[2 * i + 1];
    const double p_actor = 1.0 / (1.0 + std::exp(e - a));
    out.actor_probs[i] = {p_actor, 1.0 - p_actor};
    for (std::size_t c = 0; c < C; ++c) out.class_probs[i][c] = 1.0 / (1.0 + std::exp(-class_logits[i * C + c]));
  }
  return out;
}

template <typename T>
HeadOutputs to_head_outputs(const HeadVars<T>& vars) {
  HeadOutputs out;
  const Tensor<T>& b = vars.boxes.value();
  const std::size_t L = b.dim(0);
  out.boxes.reserve(L);
  for (std::size_t i = 0; i < L; ++i) {
    out.boxes.emplace_back(b[4 * i], b[4 * i + 1], b[4 * i + 2], b[4 * i + 3]);
  }
  out.actor_logits = vars.actor_logits.value().template cast<double>();
  out.class_logits = vars.class_logits.value().template cast<double>();
  out.grid_index = vars.grid_index;
  return out;
}

// ---------------------------------------------------------------------------
// Model wrapper.

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), params_(init_parameters(cfg_, seed)) {}

Model::Model(ModelConfig cfg, ParameterSet<float> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  check_parameters(cfg_, params_);
}

TokenVolume Model::patchify(const Tensor<float>& clip) const {
  ad::Tape<float> tape;
  const auto p = bind_parameters(tape, params_, false);
  return TokenVolume(smdt::patchify(tape, p, cfg_, clip).value().cast<double>());
}

TokenVolume Model::forward(const Tensor<float>& clip) const {
  ad::Tape<float> tape;
  const auto p = bind_parameters(tape, params_, false);
  return TokenVolume(backbone(tape, p, cfg_, clip).value().cast<double>());
}

HeadOutputs Model::heads(const SelectedTokens& sel, std::size_t grid_h, std::size_t grid_w) const {
  ad::Tape<float> tape;
  const auto p = bind_parameters(tape, params_, false);
  SelectedVars<float> vars;
  vars.actor = tape.constant(sel.actor_stream.cast<float>());
  vars.action = tape.constant(sel.action_stream.cast<float>());
  vars.grid_index = sel.grid_index;
  return to_head_outputs(smdt::heads(tape, p, cfg_, vars, grid_h, grid_w));
}

HeadOutputs Model::predict(const Tensor<float>& clip) const {
  ad::Tape<float> tape;
  const auto p = bind_parameters(tape, params_, false);
  return to_head_outputs(smdt::forward(tape, p, cfg_, clip));
}

// ---------------------------------------------------------------------------
// Training.

void OptimizerConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("optimizer config: " + msg); };
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be positive");
  if (weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(eps > 0.0)) fail("eps must be positive");
  if (total_steps == 0) fail("total_steps must be >= 1");
  if (min_lr < 0.0 || min_lr > lr) fail("min_lr must lie in [0, lr]");
  if (clip_norm < 0.0) fail("clip_norm must be >= 0");
}

double cosine_lr(const OptimizerConfig& cfg, std::size_t step) {
  if (step < cfg.warmup_steps) {
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  const double span = static_cast<double>(std::max<std::size_t>(cfg.total_steps, cfg.warmup_steps + 1) - cfg.warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / span);
  return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::step(ParameterSet<float>& params, const ParameterSet<float>& grads, double lr) {
  if (m_.size() == 0) {
    m_ = params.zeros_like();
    v_ = params.zeros_like();
  }
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params.tensors[k].data;
    const auto& g = grads.tensors[k].data;
    auto& m = m_.tensors[k].data;
    auto& v = v_.tensors[k].data;
    const bool decay = params.tensors[k].rank() >= 2;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * g[i]);
      v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * g[i] * g[i]);
      double value = p[i];
      if (decay) value -= lr * cfg_.weight_decay * value;
      value -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      p[i] = static_cast<float>(value);
    }
  }
}

template <typename T>
LossVar<T> clip_loss(ad::Tape<T>& tape, const ParamVars<T>& p, const ModelConfig& cfg, const Tensor<T>& clip,
                     const GroundTruth& gt, const TrainOptions& opts, const Assignment* frozen,
                     Assignment* used) {
  const HeadVars<T> hv = forward(tape, p, cfg, clip);
  Var<T> actor_probs = ad::softmax(hv.actor_logits);
  Var<T> class_probs = ad::sigmoid(hv.class_logits);
  Assignment assignment;
  if (frozen) {
    assignment = *frozen;
  } else {
    assignment = match(to_head_outputs(hv).to_prediction_set(), gt, opts.criterion.weights, opts.matching);
  }
  LossVar<T> loss = hungarian_loss(hv.boxes, actor_probs, class_probs, gt, assignment, opts.criterion);
  if (used) *used = std::move(assignment);
  return loss;
}

std::size_t default_thread_count() {
  if (const char* env = std::getenv("SMDT_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

Trainer::Trainer(Model& model, OptimizerConfig opt, TrainOptions opts)
    : model_(model), optimizer_(std::move(opt)), opts_(std::move(opts)) {
  optimizer_.config().validate();
  opts_.criterion.weights.validate();
  threads_ = default_thread_count();
  if (opts_.threads) {
    // SMDT_THREADS caps an explicit request as well as supplying the default.
    const char* env = std::getenv("SMDT_THREADS");
    threads_ = env && std::strtol(env, nullptr, 10) > 0 ? std::min(opts_.threads, threads_) : opts_.threads;
  }
}

StepReport Trainer::step(std::span<const TrainSample> batch) {
  if (batch.empty()) throw InputError("train step: empty batch");
  const std::size_t B = batch.size();
  std::vector<ParameterSet<float>> grads(B);
  std::vector<LossBreakdown> losses(B);

  auto run_clip = [&](std::size_t k) {
    ad::Tape<float> tape;
    const auto p = bind_parameters(tape, model_.parameters(), true);
    const LossVar<float> loss = clip_loss(tape, p, model_.config(), batch[k].clip, batch[k].gt, opts_);
    tape.backward(loss.total);
    ParameterSet<float> g;
    g.names = model_.parameters().names;
    for (const auto& v : p.vars) g.tensors.push_back(v.grad());
    grads[k] = std::move(g);
    losses[k] = loss.breakdown;
  };

  const std::size_t workers = std::min(threads_, B);
  if (workers <= 1) {
    for (std::size_t k = 0; k < B; ++k) run_clip(k);
  } else {
    std::vector<std::jthread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t k = w; k < B; k += workers) run_clip(k);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    pool.clear();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  // Reduce in clip order so results do not depend on scheduling.
  StepReport report;
  ParameterSet<float> total = grads[0];
  for (std::size_t k = 1; k < B; ++k) {
    for (std::size_t i = 0; i < total.size(); ++i) {
      auto& dst = total.tensors[i].data;
      const auto& src = grads[k].tensors[i].data;
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }
  const float inv_b = 1.0f / static_cast<float>(B);
  double sq = 0.0;
  for (auto& t : total.tensors) {
    for (float& v : t.data) {
      v *= inv_b;
      sq += static_cast<double>(v) * v;
    }
  }
  report.grad_norm = std::sqrt(sq);
  for (const auto& l : losses) {
    report.loss.total += l.total / static_cast<double>(B);
    report.loss.box_l1 += l.box_l1 / static_cast<double>(B);
    report.loss.box_giou += l.box_giou / static_cast<double>(B);
    report.loss.actor_ce += l.actor_ce / static_cast<double>(B);
    report.loss.class_bce += l.class_bce / static_cast<double>(B);
    report.loss.matched_count += l.matched_count;
  }
  if (!std::isfinite(report.loss.total) || !std::isfinite(report.grad_norm)) {
    throw NumericError("non-finite loss or gradient at step " + std::to_string(optimizer_.steps_taken()) +
                       " (loss=" + std::to_string(report.loss.total) +
                       ", grad_norm=" + std::to_string(report.grad_norm) + ")");
  }
  const double clip = optimizer_.config().clip_norm;
  if (clip > 0.0 && report.grad_norm > clip) {
    const float factor = static_cast<float>(clip / report.grad_norm);
    for (auto& t : total.tensors) {
      for (float& v : t.data) v *= factor;
    }
  }
  report.lr = cosine_lr(optimizer_.config(), optimizer_.steps_taken());
  optimizer_.step(model_.parameters(), total, report.lr);
  return report;
}

// ---------------------------------------------------------------------------

#define SMDT_INSTANTIATE(T)                                                                          \
  template ParamVars<T> bind_parameters(ad::Tape<T>&, const ParameterSet<T>&, bool);                 \
  template Var<T> patchify(ad::Tape<T>&, const ParamVars<T>&, const ModelConfig&, const Tensor<T>&); \
  template Var<T> backbone(ad::Tape<T>&, const ParamVars<T>&, const ModelConfig&, const Tensor<T>&); \
  template HeadVars<T> heads(ad::Tape<T>&, const ParamVars<T>&, const ModelConfig&,                  \
                             const SelectedVars<T>&, std::size_t, std::size_t);                      \
  template HeadVars<T> forward(ad::Tape<T>&, const ParamVars<T>&, const ModelConfig&, const Tensor<T>&); \
  template HeadOutputs to_head_outputs(const HeadVars<T>&);                                          \
  template LossVar<T> clip_loss(ad::Tape<T>&, const ParamVars<T>&, const ModelConfig&,               \
                                const Tensor<T>&, const GroundTruth&, const TrainOptions&,           \
                                const Assignment*, Assignment*);

SMDT_INSTANTIATE(float)
SMDT_INSTANTIATE(double)

#undef SMDT_INSTANTIATE

}  // namespace smdt
