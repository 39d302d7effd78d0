#include "smdt/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "smdt/errors.hpp"

namespace smdt {

std::vector<Detection> detect(const HeadOutputs& out, double theta, std::uint64_t clip_id) {
  if (!(theta >= 0.0 && theta <= 1.0)) throw InputError("detect: theta must lie in [0, 1]");
  const PredictionSet pred = out.to_prediction_set();
  std::vector<Detection> dets;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred.actor_probs[i][0] > theta) {
      dets.push_back({pred.boxes[i].clamped(), pred.actor_probs[i][0], pred.class_probs[i], i, clip_id});
    }
  }
  return dets;
}

std::vector<Detection> non_max_suppression(std::vector<Detection> dets, double iou_threshold) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.actor_score > b.actor_score; });
  std::vector<Detection> kept;
  for (auto& d : dets) {
    const CornerBox c = to_corners(d.box);
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.clip_id == d.clip_id && iou(to_corners(k.box), c) > iou_threshold;
    });
    if (!suppressed) kept.push_back(std::move(d));
  }
  return kept;
}

namespace {

// Marks each ranked detection as a true positive by greedy one-to-one
// matching against the boxes of its own clip.
std::vector<char> greedy_true_positives(const std::vector<ScoredBox>& ranked,
                                        const std::map<std::uint64_t, std::vector<Box>>& gts,
                                        double iou_threshold) {
  std::map<std::uint64_t, std::vector<char>> used;
  for (const auto& [clip, boxes] : gts) used[clip].assign(boxes.size(), 0);
  std::vector<char> tp(ranked.size(), 0);
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    const auto it = gts.find(ranked[k].clip_id);
    if (it == gts.end()) continue;
    auto& taken = used[ranked[k].clip_id];
    const CornerBox det = to_corners(ranked[k].box);
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < it->second.size(); ++j) {
      if (taken[j]) continue;
      const double o = iou(det, to_corners(it->second[j]));
      if (o > best) {
        best = o;
        best_j = j;
      }
    }
    if (best >= iou_threshold) {
      taken[best_j] = 1;
      tp[k] = 1;
    }
  }
  return tp;
}

void rank(std::vector<ScoredBox>& dets) {
  std::sort(dets.begin(), dets.end(), [](const ScoredBox& a, const ScoredBox& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.token_index != b.token_index) return a.token_index < b.token_index;
    return a.clip_id < b.clip_id;
  });
}

}  // namespace

ApResult average_precision(std::vector<ScoredBox> dets, const std::map<std::uint64_t, std::vector<Box>>& gts,
                           double iou_threshold) {
  ApResult result;
  for (const auto& [clip, boxes] : gts) result.num_gt += boxes.size();
  if (result.num_gt == 0) return result;
  result.valid = true;
  if (dets.empty()) return result;

  rank(dets);
  const std::vector<char> tp = greedy_true_positives(dets, gts, iou_threshold);

  std::vector<double> precision(dets.size());
  std::size_t hits = 0;
  for (std::size_t k = 0; k < dets.size(); ++k) {
    hits += tp[k];
    precision[k] = static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  // Precision envelope: best precision at this rank or any later one.
  for (std::size_t k = dets.size() - 1; k-- > 0;) precision[k] = std::max(precision[k], precision[k + 1]);
  // Recall advances by 1/num_gt exactly at each true positive.
  double area = 0.0;
  for (std::size_t k = 0; k < dets.size(); ++k) {
    if (tp[k]) area += precision[k];
  }
  result.value = area / static_cast<double>(result.num_gt);
  return result;
}

EvalReport frame_map(const std::vector<Detection>& dets, const std::vector<ClipGroundTruth>& gts,
                     std::size_t num_classes, double iou_threshold) {
  EvalReport report;
  report.per_class_ap.assign(num_classes, 0.0);
  report.class_valid.assign(num_classes, 0);

  std::size_t total_gt = 0;
  std::map<std::uint64_t, std::vector<Box>> all_boxes;
  for (const auto& clip : gts) {
    auto& boxes = all_boxes[clip.clip_id];
    boxes.insert(boxes.end(), clip.gt.boxes.begin(), clip.gt.boxes.end());
    total_gt += clip.gt.size();
  }
  for (const auto& d : dets) {
    if (d.class_scores.size() != num_classes) throw InputError("frame_map: detection class count mismatch");
  }

  double ap_sum = 0.0;
  std::size_t valid = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::map<std::uint64_t, std::vector<Box>> class_gts;
    for (const auto& clip : gts) {
      auto& boxes = class_gts[clip.clip_id];
      for (std::size_t j = 0; j < clip.gt.size(); ++j) {
        if (clip.gt.labels[j].at(c)) boxes.push_back(clip.gt.boxes[j]);
      }
    }
    std::vector<ScoredBox> scored;
    scored.reserve(dets.size());
    for (const auto& d : dets) scored.push_back({d.clip_id, d.token_index, d.box, d.actor_score * d.class_scores[c]});
    const ApResult ap = average_precision(std::move(scored), class_gts, iou_threshold);
    report.per_class_ap[c] = ap.value;
    report.class_valid[c] = ap.valid ? 1 : 0;
    if (ap.valid) {
      ap_sum += ap.value;
      ++valid;
    }
  }
  report.mean_ap = valid ? ap_sum / static_cast<double>(valid) : 0.0;

  std::vector<ScoredBox> agnostic;
  agnostic.reserve(dets.size());
  for (const auto& d : dets) agnostic.push_back({d.clip_id, d.token_index, d.box, d.actor_score});
  rank(agnostic);
  const std::vector<char> tp = greedy_true_positives(agnostic, all_boxes, iou_threshold);
  report.true_positives = static_cast<std::size_t>(std::count(tp.begin(), tp.end(), 1));
  report.false_positives = dets.size() - report.true_positives;
  report.false_negatives = total_gt - report.true_positives;
  report.precision = dets.empty() ? 0.0 : static_cast<double>(report.true_positives) / static_cast<double>(dets.size());
  report.recall = total_gt ? static_cast<double>(report.true_positives) / static_cast<double>(total_gt) : 0.0;
  report.empty_ground_truth = total_gt == 0;
  return report;
}

ad::Tensor<double> confidence_map(const HeadOutputs& out, std::size_t h, std::size_t w) {
  const PredictionSet pred = out.to_prediction_set();
  if (out.grid_index.size() != pred.size()) throw InputError("confidence_map: grid index missing");
  ad::Tensor<double> map({h, w});
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const GridIndex g = out.grid_index[i];
    if (g.row >= h || g.col >= w) throw InputError("confidence_map: grid index outside h x w");
    double& cell = map[g.row * w + g.col];
    cell = std::max(cell, pred.actor_probs[i][0]);
  }
  return map;
}

namespace {

std::ofstream open_for_write(const std::filesystem::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream os(path, mode);
  if (!os) throw IoError("cannot write " + path.string());
  return os;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

ConfidenceMapFiles export_confidence_map(const HeadOutputs& out, std::size_t h, std::size_t w,
                                         const std::filesystem::path& stem, const Assignment* assignment) {
  const ad::Tensor<double> map = confidence_map(out, h, w);
  ConfidenceMapFiles files{stem.string() + "_confidence.csv", stem.string() + "_confidence.pgm",
                           stem.string() + "_boxes.csv"};

  {
    auto os = open_for_write(files.map_csv, std::ios::out | std::ios::binary);
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) os << (c ? "," : "") << fmt(map[r * w + c]);
      os << '\n';
    }
    if (!os) throw IoError("failed writing " + files.map_csv.string());
  }
  {
    auto os = open_for_write(files.graymap, std::ios::out | std::ios::binary);
    os << "P5\n" << w << ' ' << h << "\n255\n";
    for (double v : map.data) {
      os.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
    }
    if (!os) throw IoError("failed writing " + files.graymap.string());
  }
  {
    std::vector<char> matched(out.size(), 0);
    if (assignment) {
      for (const auto& [i, j] : assignment->pairs) {
        if (i < matched.size()) matched[i] = 1;
      }
    }
    const PredictionSet pred = out.to_prediction_set();
    auto os = open_for_write(files.boxes_csv, std::ios::out | std::ios::binary);
    os << "token,row,col,cx,cy,h,w,p_actor,matched\n";
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const Box& b = pred.boxes[i];
      os << i << ',' << out.grid_index[i].row << ',' << out.grid_index[i].col << ',' << fmt(b.cx()) << ','
         << fmt(b.cy()) << ',' << fmt(b.h()) << ',' << fmt(b.w()) << ',' << fmt(pred.actor_probs[i][0]) << ','
         << (matched[i] ? 1 : 0) << '\n';
    }
    if (!os) throw IoError("failed writing " + files.boxes_csv.string());
  }
  return files;
}

ad::Tensor<double> read_confidence_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::vector<double> values;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw FormatError(path.string() + ":" + std::to_string(rows + 1) + ": bad number '" + cell + "'");
      }
      ++n;
    }
    if (rows == 0) cols = n;
    if (n != cols) throw FormatError(path.string() + ": ragged row " + std::to_string(rows + 1));
    ++rows;
  }
  return ad::Tensor<double>({rows, cols}, std::move(values));
}

HeadOutputs predict(const Model& model, const ad::Tensor<float>& clip, ActionStream stream) {
  if (stream == ActionStream::Selected) return model.predict(clip);
  const Strategy strategy = model.config().strategy;
  if (strategy == Strategy::MaxPoolClass) {
    throw InputError("central-frame action stream is not defined for maxpool_class");
  }
  const TokenVolume v = model.forward(clip);
  SelectedTokens sel = select(v, strategy);
  const std::size_t hw = v.h() * v.w(), d = v.d();
  const std::size_t central = v.t() / 2;
  for (std::size_t i = 0; i < sel.count; ++i) {
    const std::size_t src = (central * hw + i % hw) * d;
    std::copy_n(v.data.data.begin() + static_cast<std::ptrdiff_t>(src), d,
                sel.action_stream.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return model.heads(sel, v.h(), v.w());
}

EvalReport evaluate_model(const Model& model, const std::vector<EvalClip>& clips, double theta,
                          ActionStream stream, double iou_threshold) {
  std::vector<Detection> dets;
  std::vector<ClipGroundTruth> gts;
  gts.reserve(clips.size());
  for (const EvalClip& c : clips) {
    const auto found = detect(predict(model, c.pixels, stream), theta, c.clip_id);
    dets.insert(dets.end(), found.begin(), found.end());
    gts.push_back({c.clip_id, c.gt});
  }
  return frame_map(dets, gts, model.config().num_classes, iou_threshold);
}

}  // namespace smdt
