#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "smdt/geometry.hpp"

namespace smdt {

/// Multi-hot action labels, one byte per class.
using Labels = std::vector<std::uint8_t>;

/// L predicted triplets: box, (p(actor), p(no-actor)) and per-class probabilities.
struct PredictionSet {
  std::vector<Box> boxes;
  std::vector<std::array<double, 2>> actor_probs;
  std::vector<std::vector<double>> class_probs;

  std::size_t size() const { return boxes.size(); }
  /// Throws InputError on length mismatch or actor pairs not summing to 1.
  void validate() const;
};

/// N annotated instances at the central frame.
struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<Labels> labels;

  std::size_t size() const { return boxes.size(); }
  bool empty() const { return boxes.empty(); }
  /// Every label vector has `num_classes` entries and at least one positive.
  void validate(std::size_t num_classes) const;
};

struct LossWeights {
  double lambda_iou = 2.0;
  double lambda_l1 = 5.0;
  double lambda_actor = 2.0;
  double lambda_class = 6.0;

  void validate() const;
};

/// Dense L x N matrix, row i = prediction, column j = target.
class CostMatrix {
 public:
  CostMatrix() = default;
  CostMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& operator()(std::size_t i, std::size_t j) { return values_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return values_[i * cols_ + j]; }
  const std::vector<double>& values() const { return values_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

struct Assignment {
  /// (prediction, target), sorted by target index; one pair per target.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  /// Predictions assigned the no-actor class, ascending.
  std::vector<std::size_t> unmatched;

  /// Sum of matched entries, accumulated in target order.
  double total_cost(const CostMatrix& cost) const;
};

enum class CostMode {
  /// lambda-weighted GIoU + L1 + actor NLL + positive-class NLL.
  Printed,
  /// Marginal change of the training loss when token i takes target j
  /// instead of the no-actor class. Minimising it minimises the loss.
  LossConsistent,
};

struct MatchingOptions {
  CostMode mode = CostMode::Printed;
  /// Only used by LossConsistent, mirrors the criterion's weight.
  double no_actor_weight = 1.0;
};

/// Probabilities are clamped to [1e-7, 1 - 1e-7] before every logarithm.
inline constexpr double kProbClamp = 1e-7;

/// Throws InputError when the ground truth is empty.
CostMatrix matching_cost(const PredictionSet& pred, const GroundTruth& gt, const LossWeights& w,
                         const MatchingOptions& opts = {});

/// Exact minimum-cost injective map from columns (targets) to rows
/// (predictions); O(N^2 L). Requires rows >= cols >= 1 and finite entries.
Assignment hungarian(const CostMatrix& cost);

/// matching_cost followed by hungarian; an empty frame leaves every
/// prediction unmatched.
Assignment match(const PredictionSet& pred, const GroundTruth& gt, const LossWeights& w,
                 const MatchingOptions& opts = {});

}  // namespace smdt
