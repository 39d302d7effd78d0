// smdt: data generation, training, evaluation, detection, gradient checks
// and strategy ablations for the sparse multi-actor detection toy model.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "experiment.hpp"
#include "run_config.hpp"
#include "smdt/errors.hpp"
#include "smdt/evaluation.hpp"

namespace fs = std::filesystem;
using namespace smdt;
using namespace smdt::app;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kRuntime = 2;

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void print_report(const EvalReport& r, const std::vector<std::string>& classes) {
  std::printf("mAP        %.4f\n", r.mean_ap);
  std::printf("precision  %.4f\n", r.precision);
  std::printf("recall     %.4f\n", r.recall);
  std::printf("TP %zu  FP %zu  FN %zu\n", r.true_positives, r.false_positives, r.false_negatives);
  std::printf("%-14s %s\n", "class", "AP");
  for (std::size_t c = 0; c < r.per_class_ap.size(); ++c) {
    const std::string name = c < classes.size() ? classes[c] : "class" + std::to_string(c);
    if (r.class_valid[c]) {
      std::printf("%-14s %.4f\n", name.c_str(), r.per_class_ap[c]);
    } else {
      std::printf("%-14s n/a (no ground truth)\n", name.c_str());
    }
  }
}

Model load_model(const RunConfig& cfg, const fs::path& checkpoint) {
  if (!fs::exists(checkpoint)) throw IoError("checkpoint '" + checkpoint.string() + "' does not exist");
  return Model(cfg.model, read_checkpoint<float>(checkpoint));
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  const auto entries = manifest_entries(cfg);
  write_manifest(out / "manifest.jsonl", entries);
  write_text(out / "run_config.json", dump_run_config(cfg));
  std::printf("wrote %zu train and %zu val clips to %s\n", cfg.data.train_clips, cfg.data.val_clips,
              (out / "manifest.jsonl").string().c_str());
  return kOk;
}

int cmd_train(const RunConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  write_text(out_dir / "run_config.json", dump_run_config(cfg));
  const fs::path metrics_path = out_dir / "metrics.csv", eval_path = out_dir / "eval.csv";
  std::ofstream metrics(metrics_path, std::ios::binary), evals(eval_path, std::ios::binary);
  if (!metrics || !evals) throw IoError("cannot write logs in '" + out_dir.string() + "'");
  metrics << "step,lr,total,box_l1,box_giou,actor_ce,class_bce\n";
  evals << "epoch,step,seconds,mean_loss,map,precision,recall\n";

  const Dataset data = build_dataset(cfg);
  const fs::path checkpoint = out_dir / "model.smdt";
  TrainHooks hooks;
  hooks.on_step = [&](std::size_t step, const StepReport& r) {
    metrics << step << ',' << fmt(r.lr, "%.9g") << ',' << fmt(r.loss.total, "%.9g") << ','
            << fmt(r.loss.box_l1, "%.9g") << ',' << fmt(r.loss.box_giou, "%.9g") << ','
            << fmt(r.loss.actor_ce, "%.9g") << ',' << fmt(r.loss.class_bce, "%.9g") << '\n';
  };
  hooks.on_eval = [&](const EvalPoint& p) {
    evals << p.epoch << ',' << p.step << ',' << fmt(p.seconds, "%.1f") << ',' << fmt(p.mean_loss) << ','
          << fmt(p.report.mean_ap) << ',' << fmt(p.report.precision) << ',' << fmt(p.report.recall) << '\n';
    evals.flush();
    metrics.flush();
    std::printf("epoch %zu step %zu loss %.4f mAP %.4f P %.4f R %.4f (%.0fs)\n", p.epoch, p.step, p.mean_loss,
                p.report.mean_ap, p.report.precision, p.report.recall, p.seconds);
    std::fflush(stdout);
  };
  const TrainResult result = run_training(cfg, data, hooks);
  write_checkpoint(checkpoint, result.model.parameters());
  if (!metrics || !evals) throw IoError("failed writing logs in '" + out_dir.string() + "'");
  std::printf("%zu steps in %.0fs%s%s; checkpoint %s\n", result.steps, result.seconds,
              result.reached_target ? ", target mAP reached" : "", result.out_of_time ? ", time budget hit" : "",
              checkpoint.string().c_str());
  if (!result.evals.empty()) print_report(result.evals.back().report, cfg.data.sprites.classes);
  return kOk;
}

int cmd_eval(const RunConfig& cfg, const fs::path& checkpoint, const std::string& stream) {
  const ActionStream mode = stream == "central" ? ActionStream::CentralFrame : ActionStream::Selected;
  const Model model = load_model(cfg, checkpoint);
  const Dataset data = build_dataset([&] {
    RunConfig only_val = cfg;
    only_val.data.train_clips = 0;
    return only_val;
  }());
  const EvalReport r = evaluate_model(model, data.val, cfg.theta, mode, cfg.iou_threshold);
  std::printf("%zu validation clips, theta %.3f, action stream %s\n", data.val.size(), cfg.theta, stream.c_str());
  print_report(r, cfg.data.sprites.classes);
  return kOk;
}

int cmd_detect(const RunConfig& cfg, const fs::path& checkpoint, std::uint64_t seed, double theta,
               const fs::path& stem) {
  const Model model = load_model(cfg, checkpoint);
  const GeneratedClip clip = gen_clip(seed, cfg.data.sprites, seed);
  const HeadOutputs out = model.predict(clip.pixels);
  const GridDims g = cfg.model.output_grid();
  Assignment assignment;
  if (!clip.record.annotations.empty()) {
    assignment = match(out.to_prediction_set(), clip.record.annotations, cfg.weights,
                       cfg.train_options().matching);
  }
  if (!stem.parent_path().empty()) fs::create_directories(stem.parent_path());
  const ConfidenceMapFiles files = export_confidence_map(out, g.h, g.w, stem, &assignment);
  const auto dets = detect(out, theta, seed);
  std::printf("clip %llu: %zu ground-truth actors, %zu detections at theta %.3f\n",
              static_cast<unsigned long long>(seed), clip.record.annotations.size(), dets.size(), theta);
  for (const Detection& d : dets) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < d.class_scores.size(); ++c) {
      if (d.class_scores[c] > d.class_scores[best]) best = c;
    }
    std::printf("  token %4zu  p(actor) %.3f  box (%.3f, %.3f, %.3f, %.3f)  top class %s %.3f\n", d.token_index,
                d.actor_score, d.box.cx(), d.box.cy(), d.box.h(), d.box.w(), cfg.data.sprites.classes[best].c_str(),
                d.class_scores[best]);
  }
  std::printf("wrote %s, %s, %s\n", files.map_csv.string().c_str(), files.graymap.string().c_str(),
              files.boxes_csv.string().c_str());
  return kOk;
}

int cmd_gradcheck(const RunConfig& cfg) {
  ModelConfig mc = cfg.model;
  mc.init_std = cfg.gradcheck.init_std;
  const ParameterSet<double> params = init_parameters(mc, cfg.seed).cast<double>();
  const SplitSeeds seeds = split_seeds(cfg.data.base_seed, 0, 1);
  const GeneratedClip clip = gen_clip(seeds.validation[0], cfg.data.sprites, seeds.validation[0]);
  const ad::Tensor<double> pixels = clip.pixels.cast<double>();
  const GroundTruth& gt = clip.record.annotations;
  const TrainOptions opts = cfg.train_options();

  Assignment frozen;
  {
    ad::Tape<double> tape;
    clip_loss(tape, bind_parameters(tape, params, false), mc, pixels, gt, opts, nullptr, &frozen);
  }
  auto fn = [&](ad::Tape<double>& tape, std::span<const ad::Var<double>> x) {
    ParamVars<double> p;
    p.source = &params;
    p.vars.assign(x.begin(), x.end());
    return clip_loss(tape, p, mc, pixels, gt, opts, &frozen).total;
  };
  ad::GradCheckOptions check;
  check.eps = cfg.gradcheck.eps;
  check.floor = cfg.gradcheck.floor;
  check.max_entries_per_tensor = cfg.gradcheck.entries_per_tensor;
  const ad::GradCheckReport r = ad::grad_check(fn, params.tensors, check);
  std::printf("checked %zu entries of %zu tensors (strategy %s, %zu actors)\n", r.entries_checked, params.size(),
              std::string(strategy_name(mc.strategy)).c_str(), gt.size());
  std::printf("max relative error %.3e at %s[%zu]: analytic %.6e numeric %.6e\n", r.max_relative_error,
              params.names[r.worst_parameter].c_str(), r.worst_index, r.analytic, r.numeric);
  if (!(r.max_relative_error <= cfg.gradcheck.threshold)) {
    std::printf("FAIL: above threshold %.1e\n", cfg.gradcheck.threshold);
    return kRuntime;
  }
  std::printf("OK: below threshold %.1e\n", cfg.gradcheck.threshold);
  return kOk;
}

std::vector<Strategy> parse_strategy_list(const std::string& text) {
  std::vector<Strategy> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(parse_strategy(item));
  }
  if (out.empty()) throw ConfigError("--strategies: empty list");
  return out;
}

int cmd_ablate(const RunConfig& base, const std::vector<Strategy>& strategies, bool central,
               const fs::path& out_path) {
  // Validate every variant before any training starts.
  std::vector<RunConfig> runs;
  for (Strategy s : strategies) {
    RunConfig cfg = base;
    cfg.model.strategy = s;
    cfg.validate();
    runs.push_back(cfg);
  }
  std::ostringstream csv;
  csv << "strategy,action_stream,tokens,steps,seconds,map,precision,recall";
  for (const std::string& name : base.data.sprites.classes) csv << ",ap_" << name;
  csv << '\n';
  auto row = [&](const RunConfig& cfg, const char* stream, const TrainResult& t, const EvalReport& r) {
    csv << strategy_name(cfg.model.strategy) << ',' << stream << ',' << cfg.model.token_count() << ',' << t.steps
        << ',' << fmt(t.seconds, "%.1f") << ',' << fmt(r.mean_ap) << ',' << fmt(r.precision) << ','
        << fmt(r.recall);
    for (std::size_t c = 0; c < r.per_class_ap.size(); ++c) {
      csv << ',' << (r.class_valid[c] ? fmt(r.per_class_ap[c]) : std::string("nan"));
    }
    csv << '\n';
  };
  const Dataset data = build_dataset(base);
  for (const RunConfig& cfg : runs) {
    std::fprintf(stderr, "ablate: training %s\n", std::string(strategy_name(cfg.model.strategy)).c_str());
    const TrainResult t = run_training(cfg, data);
    row(cfg, "selected", t, t.evals.back().report);
    if (central && cfg.model.strategy != Strategy::MaxPoolClass) {
      row(cfg, "central", t,
          evaluate_model(t.model, data.val, cfg.theta, ActionStream::CentralFrame, cfg.iou_threshold));
    }
  }
  std::fputs(csv.str().c_str(), stdout);
  if (!out_path.empty()) write_text(out_path, csv.str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse multi-actor detection toy pipeline"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_path, out, checkpoint, strategies = "two_ct,ct,tubelets", stream = "selected", ablate_out;
  std::uint64_t clip_seed = 0;
  double theta = kDefaultTheta;
  bool central = false;

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic train/val manifest");
  gen->add_option("--config", config_path, "Run config (JSON)")->required();
  gen->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train a model; writes metrics.csv, eval.csv and model.smdt");
  train->add_option("--config", config_path, "Run config (JSON)")->required();
  train->add_option("--out-dir", out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Frame-mAP of a checkpoint on the validation split");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--config", config_path, "Run config (JSON)")->required();
  eval->add_option("--action-stream", stream, "selected or central")
      ->check(CLI::IsMember({"selected", "central"}));

  auto* det = app.add_subcommand("detect", "Detections and confidence map for one synthetic clip");
  det->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  det->add_option("--clip-seed", clip_seed, "Seed of the clip to render")->required();
  det->add_option("--theta", theta, "Actor threshold")->check(CLI::Range(0.0, 1.0));
  det->add_option("--config", config_path, "Run config; defaults to run_config.json beside the checkpoint");
  det->add_option("--out", out, "Output path stem; defaults to detect_<seed>");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of model, selection and loss");
  grad->add_option("--config", config_path, "Run config (JSON)")->required();

  auto* abl = app.add_subcommand("ablate", "Train and evaluate each strategy under one seed; prints CSV");
  abl->add_option("--config", config_path, "Run config (JSON)")->required();
  abl->add_option("--strategies", strategies, "Comma-separated strategy names");
  abl->add_flag("--central-action", central, "Also evaluate with the central-frame action stream");
  abl->add_option("--out", ablate_out, "Also write the CSV to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*det && config_path.empty()) config_path = (fs::path(checkpoint).parent_path() / "run_config.json").string();
    const RunConfig cfg = load_run_config(config_path);
    if (*gen) return cmd_gen_data(cfg, out);
    if (*train) return cmd_train(cfg, out);
    if (*eval) return cmd_eval(cfg, checkpoint, stream);
    if (*det) return cmd_detect(cfg, checkpoint, clip_seed, theta, out.empty() ? "detect_" + std::to_string(clip_seed) : out);
    if (*grad) return cmd_gradcheck(cfg);
    if (*abl) return cmd_ablate(cfg, parse_strategy_list(strategies), central, ablate_out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kUsage;
}
