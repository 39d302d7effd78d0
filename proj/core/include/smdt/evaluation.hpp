#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "smdt/assignment.hpp"
#include "smdt/autodiff.hpp"
#include "smdt/model.hpp"

namespace smdt {

/// Default inference threshold on p(actor).
inline constexpr double kDefaultTheta = 0.2;

struct Detection {
  Box box;  // clipped to the unit square
  double actor_score = 0.0;
  std::vector<double> class_scores;
  std::size_t token_index = 0;
  std::uint64_t clip_id = 0;
};

/// Tokens whose p(actor) exceeds theta, in token order.
std::vector<Detection> detect(const HeadOutputs& out, double theta, std::uint64_t clip_id = 0);

/// Class-agnostic greedy suppression by actor score. Diagnostics only; the
/// evaluation path does not apply it.
std::vector<Detection> non_max_suppression(std::vector<Detection> dets, double iou_threshold);

struct ScoredBox {
  std::uint64_t clip_id = 0;
  std::size_t token_index = 0;
  Box box;
  double score = 0.0;
};

struct ApResult {
  double value = 0.0;
  std::size_t num_gt = 0;
  /// False when the class has no ground-truth instance; excluded from the mean.
  bool valid = false;
};

/// All-point interpolated AP. Detections are ranked by score (ties by token,
/// then clip); each is a true positive when its best-overlapping unmatched
/// box in the same clip reaches `iou_threshold`.
ApResult average_precision(std::vector<ScoredBox> dets,
                           const std::map<std::uint64_t, std::vector<Box>>& gts,
                           double iou_threshold = 0.5);

struct ClipGroundTruth {
  std::uint64_t clip_id = 0;
  GroundTruth gt;
};

struct EvalReport {
  std::vector<double> per_class_ap;
  std::vector<std::uint8_t> class_valid;
  double mean_ap = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t false_negatives = 0;
  /// Set when no ground truth exists at all; every metric is then 0.
  bool empty_ground_truth = false;
};

/// Frame-level mAP with per-class score p(actor) * p(class), plus
/// class-agnostic precision/recall over the given detections.
EvalReport frame_map(const std::vector<Detection>& dets, const std::vector<ClipGroundTruth>& gts,
                     std::size_t num_classes, double iou_threshold = 0.5);

/// Per grid cell, the highest p(actor) over tokens sharing that cell.
ad::Tensor<double> confidence_map(const HeadOutputs& out, std::size_t h, std::size_t w);

struct ConfidenceMapFiles {
  std::filesystem::path map_csv;
  std::filesystem::path graymap;
  std::filesystem::path boxes_csv;
};

/// Writes `<stem>_confidence.csv` (h rows of w values), `<stem>_confidence.pgm`
/// (binary P5, maxval 255) and `<stem>_boxes.csv` (every token box, flagged
/// when `assignment` matched it). Throws IoError when a file cannot be written.
ConfidenceMapFiles export_confidence_map(const HeadOutputs& out, std::size_t h, std::size_t w,
                                         const std::filesystem::path& stem,
                                         const Assignment* assignment = nullptr);

/// Parses a confidence CSV back into an [h, w] tensor.
ad::Tensor<double> read_confidence_csv(const std::filesystem::path& path);

/// Source of the class-head input at inference time.
enum class ActionStream {
  /// Whatever the model's strategy selects.
  Selected,
  /// The central-frame token of each cell, removing all temporal context
  /// the selection would add. Not available for maxpool_class.
  CentralFrame,
};

HeadOutputs predict(const Model& model, const ad::Tensor<float>& clip, ActionStream stream);

struct EvalClip {
  std::uint64_t clip_id = 0;
  ad::Tensor<float> pixels;
  GroundTruth gt;
};

/// detect() at `theta` on every clip followed by frame_map().
EvalReport evaluate_model(const Model& model, const std::vector<EvalClip>& clips, double theta,
                          ActionStream stream = ActionStream::Selected, double iou_threshold = 0.5);

}  // namespace smdt
