#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "smdt/assignment.hpp"
#include "smdt/autodiff.hpp"

namespace smdt {

struct LossBreakdown {
  double total = 0.0;
  double box_l1 = 0.0;
  double box_giou = 0.0;
  double actor_ce = 0.0;
  double class_bce = 0.0;
  std::size_t matched_count = 0;
};

enum class ActorLabel : std::uint8_t { Actor, Empty };

/// Per-token supervision derived from an assignment. Only matched tokens
/// carry box and class targets.
struct TokenTargets {
  std::vector<ActorLabel> actor;    // length L
  std::vector<std::size_t> tokens;  // matched token indices, in target order
  std::vector<Box> boxes;           // aligned with tokens
  std::vector<Labels> labels;       // aligned with tokens
};

struct CriterionOptions {
  LossWeights weights;
  /// Multiplies the NLL of tokens whose target is the no-actor class.
  double no_actor_weight = 1.0;
};

/// Throws InputError on out-of-range or repeated indices.
TokenTargets build_targets(const Assignment& assignment, const GroundTruth& gt, std::size_t L);

/// -log p(target), scaled by `no_actor_weight` for the no-actor target.
double actor_ce(std::array<double, 2> probs, ActorLabel target, double no_actor_weight = 1.0);

/// Binary cross-entropy averaged over classes.
double class_bce(std::span<const double> probs, std::span<const std::uint8_t> labels);

template <typename T>
struct LossVar {
  ad::Var<T> total;
  LossBreakdown breakdown;
};

/// Hungarian loss on a tape, for boxes [L,4] in (cx,cy,h,w), actor
/// probabilities [L,2] and class probabilities [L,C]. Box and class terms
/// are normalised by max(N,1), the actor term by L. The assignment is a
/// constant: no gradient flows through the matching.
template <typename T>
LossVar<T> hungarian_loss(const ad::Var<T>& boxes, const ad::Var<T>& actor_probs,
                          const ad::Var<T>& class_probs, const GroundTruth& gt,
                          const Assignment& assignment, const CriterionOptions& opts);

LossBreakdown hungarian_loss(const PredictionSet& pred, const GroundTruth& gt,
                             const Assignment& assignment, const CriterionOptions& opts);

}  // namespace smdt
