#include "run_config.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "smdt/errors.hpp"
#include "smdt/token_selection.hpp"

namespace smdt::app {

using nlohmann::json;

namespace {

// Reads the keys of one JSON object and remembers which were consumed, so
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) fail("", "expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    const json* v = take(key);
    if (!v) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v->is_boolean()) fail(key, "expected true or false");
      out = v->get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v->is_number_integer() && !v->is_number_unsigned()) fail(key, "expected a non-negative integer");
      if (v->is_number_integer() && v->get<std::int64_t>() < 0) fail(key, "expected a non-negative integer");
      const std::uint64_t u = v->get<std::uint64_t>();
      if (u > std::numeric_limits<T>::max()) fail(key, "value out of range");
      out = static_cast<T>(u);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v->is_number()) fail(key, "expected a number");
      out = v->get<double>();
      if (!std::isfinite(out)) fail(key, "expected a finite number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v->is_string()) fail(key, "expected a string");
      out = v->get<std::string>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported config value type");
    }
  }

  const json* take(const std::string& key) {
    const auto it = node_.find(key);
    if (it == node_.end()) return nullptr;
    used_.insert(key);
    return &*it;
  }

  template <typename Fn>
  void section(const std::string& key, Fn&& fn) {
    const json* v = take(key);
    if (!v) return;
    Section child(*v, join(key));
    fn(child);
    child.finish();
  }

  void finish() const {
    for (const auto& [key, value] : node_.items()) {
      if (!used_.count(key)) fail(key, "unknown key");
    }
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError(join(key) + ": " + msg);
  }

  std::string join(const std::string& key) const {
    if (key.empty()) return path_;
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const json& node_;
  std::string path_;
  std::set<std::string> used_;
};

const char* cost_mode_name(CostMode m) { return m == CostMode::Printed ? "printed" : "loss_consistent"; }

void read_stages(Section& s, std::vector<StageConfig>& stages) {
  const json* v = s.take("stages");
  if (!v) return;
  if (!v->is_array() || v->empty()) s.fail("stages", "expected a non-empty array");
  stages.clear();
  for (std::size_t i = 0; i < v->size(); ++i) {
    Section st((*v)[i], s.join("stages[" + std::to_string(i) + "]"));
    StageConfig c;
    st.get("width", c.width);
    st.get("depth", c.depth);
    st.get("heads", c.heads);
    st.get("stride", c.stride);
    st.get("kv_stride", c.kv_stride);
    st.finish();
    stages.push_back(c);
  }
}

void read_model(Section& s, ModelConfig& m) {
  s.get("channels", m.channels);
  s.get("frames", m.frames);
  s.get("height", m.height);
  s.get("width", m.width);
  s.get("patch_t", m.patch_t);
  s.get("patch_xy", m.patch_xy);
  s.get("patch_kernel_t", m.patch_kernel_t);
  s.get("patch_kernel_xy", m.patch_kernel_xy);
  s.get("embed_dim", m.embed_dim);
  read_stages(s, m.stages);
  s.get("remove_last_pool", m.remove_last_pool);
  s.get("mlp_ratio", m.mlp_ratio);
  s.get("d_out", m.d_out);
  s.get("num_classes", m.num_classes);
  std::string strategy(strategy_name(m.strategy));
  s.get("strategy", strategy);
  m.strategy = parse_strategy(strategy);
  s.get("actor_prior", m.actor_prior);
  s.get("init_std", m.init_std);
  s.get("pixel_mean", m.pixel_mean);
  s.get("pixel_std", m.pixel_std);
}

void read_sprites(Section& s, SpriteConfig& c) {
  s.get("frames", c.frames);
  s.get("height", c.height);
  s.get("width", c.width);
  s.get("min_sprites", c.min_sprites);
  s.get("max_sprites", c.max_sprites);
  s.get("small_min", c.small_min);
  s.get("small_max", c.small_max);
  s.get("large_min", c.large_min);
  s.get("large_max", c.large_max);
  s.get("min_speed", c.min_speed);
  s.get("max_speed", c.max_speed);
  s.get("blink_probability", c.blink_probability);
  s.get("max_overlap", c.max_overlap);
  s.get("background", c.background);
  s.get("noise", c.noise);
  if (const json* v = s.take("classes")) {
    if (!v->is_array()) s.fail("classes", "expected an array of strings");
    c.classes.clear();
    for (const auto& name : *v) {
      if (!name.is_string()) s.fail("classes", "expected an array of strings");
      c.classes.push_back(name.get<std::string>());
    }
  }
}

void check(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  data.sprites.validate(model.num_classes);
  check(model.channels == 3, "model.channels: synthetic clips are RGB, expected 3");
  check(data.sprites.frames == model.frames && data.sprites.height == model.height &&
            data.sprites.width == model.width,
        "data.sprites: frames/height/width must equal the model's");
  check(data.train_clips >= 1, "data.train_clips must be >= 1");
  check(data.val_clips >= 1, "data.val_clips must be >= 1");
  check(data.box_jitter >= 0.0 && data.box_jitter <= 0.2, "data.box_jitter must lie in [0, 0.2]");
  check(data.color_jitter >= 0.0 && data.color_jitter <= 0.5, "data.color_jitter must lie in [0, 0.5]");
  weights.validate();
  check(no_actor_weight >= 0.0, "loss.no_actor_weight must be >= 0");
  check(train.epochs >= 1, "train.epochs must be >= 1");
  check(train.batch_size >= 1, "train.batch_size must be >= 1");
  check(train.target_map >= 0.0 && train.target_map <= 1.0, "train.target_map must lie in [0, 1]");
  check(train.time_budget >= 0.0, "train.time_budget must be >= 0");
  optimizer_for_run().validate();
  check(theta >= 0.0 && theta <= 1.0, "eval.theta must lie in [0, 1]");
  check(iou_threshold > 0.0 && iou_threshold <= 1.0, "eval.iou_threshold must lie in (0, 1]");
  check(gradcheck.eps > 0.0 && gradcheck.floor > 0.0 && gradcheck.threshold > 0.0 && gradcheck.init_std > 0.0,
        "gradcheck: eps, floor, threshold and init_std must be positive");
}

std::size_t RunConfig::steps_per_epoch() const {
  return (data.train_clips + train.batch_size - 1) / train.batch_size;
}

OptimizerConfig RunConfig::optimizer_for_run() const {
  OptimizerConfig o = optimizer;
  o.total_steps = train.epochs * steps_per_epoch();
  return o;
}

TrainOptions RunConfig::train_options() const {
  TrainOptions t;
  t.criterion.weights = weights;
  t.criterion.no_actor_weight = no_actor_weight;
  t.matching.mode = cost_mode;
  t.matching.no_actor_weight = no_actor_weight;
  t.threads = train.threads;
  return t;
}

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  json root;
  try {
    root = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  RunConfig cfg;
  try {
    Section top(root, "");
    top.get("seed", cfg.seed);
    top.section("model", [&](Section& s) { read_model(s, cfg.model); });
    top.section("data", [&](Section& s) {
      s.get("base_seed", cfg.data.base_seed);
      s.get("train_clips", cfg.data.train_clips);
      s.get("val_clips", cfg.data.val_clips);
      s.get("box_jitter", cfg.data.box_jitter);
      s.get("color_jitter", cfg.data.color_jitter);
      s.section("sprites", [&](Section& sp) { read_sprites(sp, cfg.data.sprites); });
    });
    top.section("loss", [&](Section& s) {
      s.get("lambda_iou", cfg.weights.lambda_iou);
      s.get("lambda_l1", cfg.weights.lambda_l1);
      s.get("lambda_actor", cfg.weights.lambda_actor);
      s.get("lambda_class", cfg.weights.lambda_class);
      s.get("no_actor_weight", cfg.no_actor_weight);
      std::string mode = cost_mode_name(cfg.cost_mode);
      s.get("matching_cost", mode);
      if (mode == "printed") {
        cfg.cost_mode = CostMode::Printed;
      } else if (mode == "loss_consistent") {
        cfg.cost_mode = CostMode::LossConsistent;
      } else {
        s.fail("matching_cost", "expected \"printed\" or \"loss_consistent\"");
      }
    });
    top.section("optimizer", [&](Section& s) {
      s.get("lr", cfg.optimizer.lr);
      s.get("weight_decay", cfg.optimizer.weight_decay);
      s.get("beta1", cfg.optimizer.beta1);
      s.get("beta2", cfg.optimizer.beta2);
      s.get("eps", cfg.optimizer.eps);
      s.get("warmup_steps", cfg.optimizer.warmup_steps);
      s.get("min_lr", cfg.optimizer.min_lr);
      s.get("clip_norm", cfg.optimizer.clip_norm);
    });
    top.section("train", [&](Section& s) {
      s.get("epochs", cfg.train.epochs);
      s.get("batch_size", cfg.train.batch_size);
      s.get("threads", cfg.train.threads);
      s.get("eval_every", cfg.train.eval_every);
      s.get("target_map", cfg.train.target_map);
      s.get("time_budget", cfg.train.time_budget);
    });
    top.section("eval", [&](Section& s) {
      s.get("theta", cfg.theta);
      s.get("iou_threshold", cfg.iou_threshold);
    });
    top.section("gradcheck", [&](Section& s) {
      s.get("eps", cfg.gradcheck.eps);
      s.get("floor", cfg.gradcheck.floor);
      s.get("threshold", cfg.gradcheck.threshold);
      s.get("entries_per_tensor", cfg.gradcheck.entries_per_tensor);
      s.get("init_std", cfg.gradcheck.init_std);
    });
    top.finish();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  } catch (const json::exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_run_config(text.str(), path.string());
}

std::string dump_run_config(const RunConfig& c) {
  json stages = json::array();
  for (const StageConfig& s : c.model.stages) {
    stages.push_back({{"width", s.width}, {"depth", s.depth}, {"heads", s.heads}, {"stride", s.stride},
                      {"kv_stride", s.kv_stride}});
  }
  const ModelConfig& m = c.model;
  const SpriteConfig& sp = c.data.sprites;
  json root = {
      {"seed", c.seed},
      {"model",
       {{"channels", m.channels}, {"frames", m.frames}, {"height", m.height}, {"width", m.width},
        {"patch_t", m.patch_t}, {"patch_xy", m.patch_xy},
        {"patch_kernel_t", m.patch_kernel_t}, {"patch_kernel_xy", m.patch_kernel_xy}, {"embed_dim", m.embed_dim}, {"stages", stages},
        {"remove_last_pool", m.remove_last_pool}, {"mlp_ratio", m.mlp_ratio}, {"d_out", m.d_out},
        {"num_classes", m.num_classes}, {"strategy", std::string(strategy_name(m.strategy))},
        {"actor_prior", m.actor_prior}, {"init_std", m.init_std}, {"pixel_mean", m.pixel_mean},
        {"pixel_std", m.pixel_std}}},
      {"data",
       {{"base_seed", c.data.base_seed}, {"train_clips", c.data.train_clips}, {"val_clips", c.data.val_clips},
        {"box_jitter", c.data.box_jitter}, {"color_jitter", c.data.color_jitter},
        {"sprites",
         {{"frames", sp.frames}, {"height", sp.height}, {"width", sp.width}, {"min_sprites", sp.min_sprites},
          {"max_sprites", sp.max_sprites}, {"small_min", sp.small_min}, {"small_max", sp.small_max},
          {"large_min", sp.large_min}, {"large_max", sp.large_max}, {"min_speed", sp.min_speed},
          {"max_speed", sp.max_speed}, {"blink_probability", sp.blink_probability},
          {"max_overlap", sp.max_overlap}, {"background", sp.background}, {"noise", sp.noise},
          {"classes", sp.classes}}}}},
      {"loss",
       {{"lambda_iou", c.weights.lambda_iou}, {"lambda_l1", c.weights.lambda_l1},
        {"lambda_actor", c.weights.lambda_actor}, {"lambda_class", c.weights.lambda_class},
        {"no_actor_weight", c.no_actor_weight}, {"matching_cost", cost_mode_name(c.cost_mode)}}},
      {"optimizer",
       {{"lr", c.optimizer.lr}, {"weight_decay", c.optimizer.weight_decay}, {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2}, {"eps", c.optimizer.eps}, {"warmup_steps", c.optimizer.warmup_steps},
        {"min_lr", c.optimizer.min_lr}, {"clip_norm", c.optimizer.clip_norm}}},
      {"train",
       {{"epochs", c.train.epochs}, {"batch_size", c.train.batch_size}, {"threads", c.train.threads},
        {"eval_every", c.train.eval_every}, {"target_map", c.train.target_map},
        {"time_budget", c.train.time_budget}}},
      {"eval", {{"theta", c.theta}, {"iou_threshold", c.iou_threshold}}},
      {"gradcheck",
       {{"eps", c.gradcheck.eps}, {"floor", c.gradcheck.floor}, {"threshold", c.gradcheck.threshold},
        {"entries_per_tensor", c.gradcheck.entries_per_tensor}, {"init_std", c.gradcheck.init_std}}},
  };
  return root.dump(2) + "\n";
}

}  // namespace smdt::app
