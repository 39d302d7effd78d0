#include "smdt/criterion.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "smdt/errors.hpp"

namespace smdt {

TokenTargets build_targets(const Assignment& assignment, const GroundTruth& gt, std::size_t L) {
  if (assignment.pairs.size() != gt.size()) {
    throw InputError("build_targets: assignment covers " + std::to_string(assignment.pairs.size()) +
                     " targets, ground truth has " + std::to_string(gt.size()));
  }
  TokenTargets out;
  out.actor.assign(L, ActorLabel::Empty);
  std::vector<char> target_seen(gt.size(), 0);
  for (const auto& [i, j] : assignment.pairs) {
    if (i >= L || j >= gt.size()) throw InputError("build_targets: index out of range");
    if (out.actor[i] == ActorLabel::Actor) {
      throw InputError("build_targets: prediction " + std::to_string(i) + " matched twice");
    }
    if (target_seen[j]) throw InputError("build_targets: target " + std::to_string(j) + " matched twice");
    target_seen[j] = 1;
    out.actor[i] = ActorLabel::Actor;
    out.tokens.push_back(i);
    out.boxes.push_back(gt.boxes[j]);
    out.labels.push_back(gt.labels[j]);
  }
  return out;
}

double actor_ce(std::array<double, 2> probs, ActorLabel target, double no_actor_weight) {
  const std::size_t k = target == ActorLabel::Actor ? 0 : 1;
  const double nll = -std::log(std::clamp(probs[k], kProbClamp, 1.0 - kProbClamp));
  return target == ActorLabel::Actor ? nll : no_actor_weight * nll;
}

double class_bce(std::span<const double> probs, std::span<const std::uint8_t> labels) {
  if (probs.size() != labels.size() || probs.empty()) {
    throw InputError("class_bce: probabilities and labels differ in length");
  }
  double total = 0.0;
  for (std::size_t c = 0; c < probs.size(); ++c) {
    const double p = std::clamp(probs[c], kProbClamp, 1.0 - kProbClamp);
    total -= labels[c] ? std::log(p) : std::log(1.0 - p);
  }
  return total / static_cast<double>(probs.size());
}

namespace {

using ad::Shape;
using ad::Tensor;
using ad::Var;

template <typename T>
Var<T> column(const Var<T>& m, std::size_t c) {
  return ad::slice(m, 1, c, c + 1);
}

// Per-row GIoU for predicted [M,4] center-size boxes against constant targets.
template <typename T>
Var<T> giou_rows(const Var<T>& pred, const std::vector<Box>& targets) {
  ad::Tape<T>& tape = *pred.tape();
  const std::size_t M = targets.size();
  Tensor<T> tx1({M, 1}), ty1({M, 1}), tx2({M, 1}), ty2({M, 1}), tarea({M, 1});
  for (std::size_t r = 0; r < M; ++r) {
    const CornerBox c = to_corners(targets[r]);
    tx1[r] = static_cast<T>(c.x1);
    ty1[r] = static_cast<T>(c.y1);
    tx2[r] = static_cast<T>(c.x2);
    ty2[r] = static_cast<T>(c.y2);
    tarea[r] = static_cast<T>(c.area());
  }
  const Var<T> x1t = tape.constant(tx1), y1t = tape.constant(ty1);
  const Var<T> x2t = tape.constant(tx2), y2t = tape.constant(ty2);
  const Var<T> area_t = tape.constant(tarea);
  const Var<T> zero = tape.constant(Tensor<T>({M, 1}));
  const Var<T> eps = tape.constant(Tensor<T>({M, 1}, static_cast<T>(kAreaEps)));

  const Var<T> cx = column(pred, 0), cy = column(pred, 1), h = column(pred, 2), w = column(pred, 3);
  const Var<T> half_w = ad::scale(w, T(0.5)), half_h = ad::scale(h, T(0.5));
  const Var<T> x1 = ad::sub(cx, half_w), x2 = ad::add(cx, half_w);
  const Var<T> y1 = ad::sub(cy, half_h), y2 = ad::add(cy, half_h);

  const Var<T> iw = ad::maximum(ad::sub(ad::minimum(x2, x2t), ad::maximum(x1, x1t)), zero);
  const Var<T> ih = ad::maximum(ad::sub(ad::minimum(y2, y2t), ad::maximum(y1, y1t)), zero);
  const Var<T> inter = ad::mul(iw, ih);
  const Var<T> area_p = ad::mul(h, w);
  const Var<T> uni = ad::sub(ad::add(area_p, area_t), inter);
  const Var<T> ew = ad::sub(ad::maximum(x2, x2t), ad::minimum(x1, x1t));
  const Var<T> eh = ad::sub(ad::maximum(y2, y2t), ad::minimum(y1, y1t));
  const Var<T> enclosing = ad::mul(ew, eh);
  const Var<T> iou = ad::div(inter, ad::maximum(uni, eps));
  const Var<T> penalty = ad::div(ad::sub(enclosing, uni), ad::maximum(enclosing, eps));
  return ad::sub(iou, penalty);
}

}  // namespace

template <typename T>
LossVar<T> hungarian_loss(const Var<T>& boxes, const Var<T>& actor_probs, const Var<T>& class_probs,
                          const GroundTruth& gt, const Assignment& assignment,
                          const CriterionOptions& opts) {
  ad::Tape<T>& tape = *boxes.tape();
  const std::size_t L = boxes.shape().at(0);
  if (L == 0) throw InputError("hungarian_loss: no prediction tokens");
  if (boxes.shape() != Shape{L, 4} || actor_probs.shape() != Shape{L, 2} ||
      class_probs.shape().size() != 2 || class_probs.shape()[0] != L) {
    throw InputError("hungarian_loss: expected boxes [L,4], actor [L,2], class [L,C]");
  }
  const std::size_t C = class_probs.shape()[1];
  const TokenTargets targets = build_targets(assignment, gt, L);
  const std::size_t M = targets.tokens.size();
  const T norm = static_cast<T>(std::max<std::size_t>(M, 1));
  const LossWeights& w = opts.weights;
  const T lo = static_cast<T>(kProbClamp), hi = static_cast<T>(1.0 - kProbClamp);

  // Actor term over all L tokens: weighted NLL of the target column.
  Tensor<T> actor_mask({L, 2});
  for (std::size_t i = 0; i < L; ++i) {
    if (targets.actor[i] == ActorLabel::Actor) {
      actor_mask[2 * i] = T{1};
    } else {
      actor_mask[2 * i + 1] = static_cast<T>(opts.no_actor_weight);
    }
  }
  Var<T> log_actor = ad::log(ad::clamp(actor_probs, lo, hi));
  Var<T> actor_term = ad::scale(ad::sum(ad::mul(log_actor, tape.constant(std::move(actor_mask)))),
                                T{-1} / static_cast<T>(L));

  Var<T> total = ad::scale(actor_term, static_cast<T>(w.lambda_actor));
  LossBreakdown bd;
  bd.actor_ce = static_cast<double>(actor_term.value()[0]);
  bd.matched_count = M;

  if (M > 0) {
    Var<T> matched_boxes = ad::index_select(boxes, std::span<const std::size_t>(targets.tokens));
    Tensor<T> target_boxes({M, 4});
    Tensor<T> target_labels({M, C});
    for (std::size_t r = 0; r < M; ++r) {
      const auto a = targets.boxes[r].as_array();
      for (std::size_t k = 0; k < 4; ++k) target_boxes[r * 4 + k] = static_cast<T>(a[k]);
      if (targets.labels[r].size() != C) throw InputError("hungarian_loss: label width mismatch");
      for (std::size_t c = 0; c < C; ++c) target_labels[r * C + c] = targets.labels[r][c] ? T{1} : T{0};
    }

    Var<T> l1 = ad::scale(ad::sum(ad::abs(ad::sub(matched_boxes, tape.constant(target_boxes)))),
                          T{1} / norm);
    Var<T> giou = giou_rows(matched_boxes, targets.boxes);
    Var<T> giou_term = ad::scale(ad::sum(ad::add_scalar(ad::scale(giou, T{-1}), T{1})), T{1} / norm);

    // BCE = -[a log p + (1 - a) log(1 - p)], mean over classes and matched tokens.
    Var<T> p = ad::clamp(ad::index_select(class_probs, std::span<const std::size_t>(targets.tokens)), lo, hi);
    Var<T> labels = tape.constant(target_labels);
    Tensor<T> ones_t({M, C}, T{1});
    Var<T> ones = tape.constant(ones_t);
    Var<T> pos = ad::mul(labels, ad::log(p));
    Var<T> neg = ad::mul(ad::sub(ones, labels), ad::log(ad::sub(ones, p)));
    Var<T> class_term =
        ad::scale(ad::sum(ad::add(pos, neg)), T{-1} / (norm * static_cast<T>(C)));

    total = ad::add(total, ad::scale(l1, static_cast<T>(w.lambda_l1)));
    total = ad::add(total, ad::scale(giou_term, static_cast<T>(w.lambda_iou)));
    total = ad::add(total, ad::scale(class_term, static_cast<T>(w.lambda_class)));
    bd.box_l1 = static_cast<double>(l1.value()[0]);
    bd.box_giou = static_cast<double>(giou_term.value()[0]);
    bd.class_bce = static_cast<double>(class_term.value()[0]);
  }
  bd.total = static_cast<double>(total.value()[0]);
  return {total, bd};
}

LossBreakdown hungarian_loss(const PredictionSet& pred, const GroundTruth& gt,
                             const Assignment& assignment, const CriterionOptions& opts) {
  pred.validate();
  const std::size_t L = pred.size();
  const std::size_t C = L ? pred.class_probs.front().size() : (gt.empty() ? 0 : gt.labels[0].size());
  ad::Tape<double> tape;
  Tensor<double> boxes({L, 4}), actor({L, 2}), cls({L, C});
  for (std::size_t i = 0; i < L; ++i) {
    const auto a = pred.boxes[i].as_array();
    std::copy(a.begin(), a.end(), boxes.data.begin() + static_cast<std::ptrdiff_t>(4 * i));
    actor[2 * i] = pred.actor_probs[i][0];
    actor[2 * i + 1] = pred.actor_probs[i][1];
    std::copy(pred.class_probs[i].begin(), pred.class_probs[i].end(),
              cls.data.begin() + static_cast<std::ptrdiff_t>(C * i));
  }
  return hungarian_loss<double>(tape.constant(boxes), tape.constant(actor), tape.constant(cls), gt,
                                assignment, opts)
      .breakdown;
}

template LossVar<float> hungarian_loss(const ad::Var<float>&, const ad::Var<float>&,
                                       const ad::Var<float>&, const GroundTruth&,
                                       const Assignment&, const CriterionOptions&);
template LossVar<double> hungarian_loss(const ad::Var<double>&, const ad::Var<double>&,
                                        const ad::Var<double>&, const GroundTruth&,
                                        const Assignment&, const CriterionOptions&);

}  // namespace smdt
