#include "experiment.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <random>

namespace smdt::app {

Dataset build_dataset(const RunConfig& cfg) {
  const SplitSeeds seeds = split_seeds(cfg.data.base_seed, cfg.data.train_clips, cfg.data.val_clips);
  Dataset out;
  out.train.reserve(seeds.train.size());
  for (std::uint64_t s : seeds.train) {
    GeneratedClip g = gen_clip(s, cfg.data.sprites, s);
    out.train.push_back({std::move(g.pixels), std::move(g.record.annotations)});
  }
  out.val.reserve(seeds.validation.size());
  for (std::uint64_t s : seeds.validation) {
    GeneratedClip g = gen_clip(s, cfg.data.sprites, s);
    out.val.push_back({s, std::move(g.pixels), std::move(g.record.annotations)});
  }
  return out;
}

std::vector<ManifestEntry> manifest_entries(const RunConfig& cfg) {
  const SplitSeeds seeds = split_seeds(cfg.data.base_seed, cfg.data.train_clips, cfg.data.val_clips);
  std::vector<ManifestEntry> out;
  out.reserve(seeds.train.size() + seeds.validation.size());
  for (std::uint64_t s : seeds.train) out.push_back({gen_clip(s, cfg.data.sprites, s).record, "train"});
  for (std::uint64_t s : seeds.validation) out.push_back({gen_clip(s, cfg.data.sprites, s).record, "val"});
  return out;
}

TrainResult run_training(const RunConfig& cfg, const Dataset& data, const TrainHooks& hooks) {
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(Clock::now() - start).count(); };

  TrainResult result{Model(cfg.model, cfg.seed), {}, 0, 0.0, false, false};
  Trainer trainer(result.model, cfg.optimizer_for_run(), cfg.train_options());
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5eedf00dULL);
  std::mt19937_64 augment_rng(cfg.seed ^ 0xa11ce5ULL);
  const bool augment = cfg.data.box_jitter > 0.0 || cfg.data.color_jitter > 0.0;

  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<TrainSample> batch;

  for (std::size_t epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t steps_this_epoch = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.train.batch_size) {
      if (cfg.train.time_budget > 0.0 && elapsed() > cfg.train.time_budget) {
        result.out_of_time = true;
        break;
      }
      const std::size_t end = std::min(order.size(), begin + cfg.train.batch_size);
      batch.clear();
      for (std::size_t k = begin; k < end; ++k) {
        TrainSample s = data.train[order[k]];
        if (augment) {
          if (cfg.data.box_jitter > 0.0) {
            s.gt = jitter_boxes(ClipRecord{0, 0, s.gt}, cfg.data.box_jitter, augment_rng).annotations;
          }
          if (cfg.data.color_jitter > 0.0) color_jitter(s.clip, cfg.data.color_jitter, augment_rng);
        }
        batch.push_back(std::move(s));
      }
      const StepReport r = trainer.step(batch);
      ++result.steps;
      ++steps_this_epoch;
      loss_sum += r.loss.total;
      if (hooks.on_step) hooks.on_step(result.steps, r);
    }

    const bool last = epoch == cfg.train.epochs || result.out_of_time;
    const bool scheduled = cfg.train.eval_every > 0 && epoch % cfg.train.eval_every == 0;
    if (last || scheduled) {
      EvalPoint point;
      point.epoch = epoch;
      point.step = result.steps;
      point.mean_loss = steps_this_epoch ? loss_sum / static_cast<double>(steps_this_epoch) : 0.0;
      point.report = evaluate_model(result.model, data.val, cfg.theta, ActionStream::Selected, cfg.iou_threshold);
      point.seconds = elapsed();
      result.evals.push_back(point);
      if (hooks.on_eval) hooks.on_eval(point);
      if (cfg.train.target_map > 0.0 && point.report.mean_ap >= cfg.train.target_map) {
        result.reached_target = true;
        break;
      }
    }
    if (result.out_of_time) break;
  }
  result.seconds = elapsed();
  return result;
}

std::vector<double> class_prevalence(const std::vector<EvalClip>& clips, std::size_t num_classes) {
  std::vector<double> counts(num_classes, 0.0);
  std::size_t total = 0;
  for (const EvalClip& c : clips) {
    for (const Labels& l : c.gt.labels) {
      ++total;
      for (std::size_t k = 0; k < num_classes && k < l.size(); ++k) counts[k] += l[k] ? 1.0 : 0.0;
    }
  }
  for (double& v : counts) v = total ? v / static_cast<double>(total) : 0.0;
  return counts;
}

}  // namespace smdt::app
