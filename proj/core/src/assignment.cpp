#include "smdt/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "smdt/errors.hpp"

namespace smdt {

void PredictionSet::validate() const {
  if (actor_probs.size() != boxes.size() || class_probs.size() != boxes.size()) {
    throw InputError("prediction set: boxes, actor and class sequences differ in length");
  }
  for (const auto& p : actor_probs) {
    if (std::abs(p[0] + p[1] - 1.0) > 1e-6) throw InputError("actor probabilities must sum to 1");
  }
  if (!class_probs.empty()) {
    const std::size_t c = class_probs.front().size();
    for (const auto& v : class_probs) {
      if (v.size() != c) throw InputError("prediction set: ragged class probabilities");
    }
  }
}

void GroundTruth::validate(std::size_t num_classes) const {
  if (labels.size() != boxes.size()) throw InputError("ground truth: boxes and labels differ in length");
  for (const auto& l : labels) {
    if (l.size() != num_classes) {
      throw InputError("ground truth: label vector has " + std::to_string(l.size()) +
                       " entries, expected " + std::to_string(num_classes));
    }
    if (std::none_of(l.begin(), l.end(), [](std::uint8_t v) { return v != 0; })) {
      throw InputError("ground truth: instance without any active class");
    }
  }
}

void LossWeights::validate() const {
  for (double v : {lambda_iou, lambda_l1, lambda_actor, lambda_class}) {
    if (!std::isfinite(v) || v < 0.0) throw ConfigError("loss weights must be finite and >= 0");
  }
}

CostMatrix::CostMatrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

CostMatrix::CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows * cols) throw InputError("cost matrix: value count mismatch");
}

double Assignment::total_cost(const CostMatrix& cost) const {
  double total = 0.0;
  for (const auto& [i, j] : pairs) total += cost(i, j);
  return total;
}

namespace {

double clamped_log(double p) { return std::log(std::clamp(p, kProbClamp, 1.0 - kProbClamp)); }

}  // namespace

CostMatrix matching_cost(const PredictionSet& pred, const GroundTruth& gt, const LossWeights& w,
                         const MatchingOptions& opts) {
  if (gt.empty()) throw InputError("matching_cost: frame has no ground truth; skip matching");
  pred.validate();
  const std::size_t L = pred.size();
  const std::size_t N = gt.size();
  const std::size_t C = gt.labels.front().size();
  for (const auto& probs : pred.class_probs) {
    if (probs.size() != C) throw InputError("matching_cost: class count mismatch");
  }

  CostMatrix cost(L, N);
  for (std::size_t i = 0; i < L; ++i) {
    const double actor_nll = -clamped_log(pred.actor_probs[i][0]);
    const double empty_nll = -clamped_log(pred.actor_probs[i][1]);
    for (std::size_t j = 0; j < N; ++j) {
      const double box = w.lambda_iou * giou_loss(gt.boxes[j], pred.boxes[i]) +
                         w.lambda_l1 * l1_box(gt.boxes[j], pred.boxes[i]);
      double cls = 0.0;
      double c_value = 0.0;
      if (opts.mode == CostMode::Printed) {
        for (std::size_t c = 0; c < C; ++c) {
          if (gt.labels[j][c]) cls -= clamped_log(pred.class_probs[i][c]);
        }
        c_value = box + w.lambda_actor * actor_nll + w.lambda_class * cls;
      } else {
        for (std::size_t c = 0; c < C; ++c) {
          const double p = pred.class_probs[i][c];
          cls -= gt.labels[j][c] ? clamped_log(p) : clamped_log(1.0 - p);
        }
        cls /= static_cast<double>(C);
        c_value = (box + w.lambda_class * cls) / static_cast<double>(N) +
                  w.lambda_actor * (actor_nll - opts.no_actor_weight * empty_nll) /
                      static_cast<double>(L);
      }
      cost(i, j) = c_value;
    }
  }
  return cost;
}

Assignment hungarian(const CostMatrix& cost) {
  const std::size_t L = cost.rows();
  const std::size_t N = cost.cols();
  if (N == 0 || L < N) {
    throw InputError("hungarian: need rows >= cols >= 1, got " + std::to_string(L) + "x" +
                     std::to_string(N));
  }
  for (double v : cost.values()) {
    if (!std::isfinite(v)) throw InputError("hungarian: non-finite cost entry");
  }

  // Shortest augmenting path with potentials. Targets are the "rows" of the
  // classic formulation (n = N <= m = L); index 0 is a sentinel.
  constexpr double kInf = std::numeric_limits<double>::infinity();
  const std::size_t n = N, m = L;
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> owner(m + 1, 0), way(m + 1, 0);
  std::vector<double> minv(m + 1);
  std::vector<char> used(m + 1);

  for (std::size_t row = 1; row <= n; ++row) {
    owner[0] = row;
    std::size_t col0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[col0] = 1;
      const std::size_t row0 = owner[col0];
      double delta = kInf;
      std::size_t col1 = 0;
      for (std::size_t col = 1; col <= m; ++col) {
        if (used[col]) continue;
        const double cur = cost(col - 1, row0 - 1) - u[row0] - v[col];
        if (cur < minv[col]) {
          minv[col] = cur;
          way[col] = col0;
        }
        if (minv[col] < delta) {
          delta = minv[col];
          col1 = col;
        }
      }
      for (std::size_t col = 0; col <= m; ++col) {
        if (used[col]) {
          u[owner[col]] += delta;
          v[col] -= delta;
        } else {
          minv[col] -= delta;
        }
      }
      col0 = col1;
    } while (owner[col0] != 0);
    do {
      const std::size_t col1 = way[col0];
      owner[col0] = owner[col1];
      col0 = col1;
    } while (col0 != 0);
  }

  Assignment out;
  out.pairs.resize(N);
  for (std::size_t col = 1; col <= m; ++col) {
    if (owner[col] != 0) {
      out.pairs[owner[col] - 1] = {col - 1, owner[col] - 1};
    } else {
      out.unmatched.push_back(col - 1);
    }
  }
  return out;
}

Assignment match(const PredictionSet& pred, const GroundTruth& gt, const LossWeights& w,
                 const MatchingOptions& opts) {
  if (gt.empty()) {
    Assignment out;
    out.unmatched.resize(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) out.unmatched[i] = i;
    return out;
  }
  if (pred.size() < gt.size()) {
    throw InputError("match: fewer predictions (" + std::to_string(pred.size()) +
                     ") than targets (" + std::to_string(gt.size()) + ")");
  }
  return hungarian(matching_cost(pred, gt, w, opts));
}

}  // namespace smdt
