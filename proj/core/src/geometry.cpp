#include "smdt/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "smdt/errors.hpp"

namespace smdt {

Box::Box(double cx, double cy, double h, double w) : cx_(cx), cy_(cy), h_(h), w_(w) {
  if (!std::isfinite(cx) || !std::isfinite(cy) || !std::isfinite(h) || !std::isfinite(w)) {
    throw InputError("box fields must be finite");
  }
  if (h < 0.0 || w < 0.0) {
    throw InputError("box extent must be non-negative (h=" + std::to_string(h) +
                     ", w=" + std::to_string(w) + ")");
  }
}

Box Box::clamped() const {
  auto c = [](double v) { return std::clamp(v, 0.0, 1.0); };
  const CornerBox k = to_corners(*this);
  return from_corners({c(k.x1), c(k.y1), c(k.x2), c(k.y2)});
}

CornerBox to_corners(const Box& b) {
  return {b.cx() - b.w() / 2.0, b.cy() - b.h() / 2.0, b.cx() + b.w() / 2.0, b.cy() + b.h() / 2.0};
}

Box from_corners(const CornerBox& c) {
  if (!(c.x1 <= c.x2) || !(c.y1 <= c.y2)) throw InputError("corner box is inverted or non-finite");
  return Box((c.x1 + c.x2) / 2.0, (c.y1 + c.y2) / 2.0, c.y2 - c.y1, c.x2 - c.x1);
}

namespace {

double intersection(const CornerBox& a, const CornerBox& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  return iw * ih;
}

}  // namespace

double iou(const CornerBox& a, const CornerBox& b) {
  const double inter = intersection(a, b);
  const double uni = a.area() + b.area() - inter;
  return inter / std::max(uni, kAreaEps);
}

GiouResult giou_checked(const CornerBox& a, const CornerBox& b) {
  if (a.area() <= 0.0 && b.area() <= 0.0) return {0.0, true};
  const double inter = intersection(a, b);
  const double uni = a.area() + b.area() - inter;
  const double enclosing =
      (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) * (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
  const double value = inter / std::max(uni, kAreaEps) -
                       (enclosing - uni) / std::max(enclosing, kAreaEps);
  return {value, false};
}

double giou_loss(const Box& a, const Box& b) { return 1.0 - giou(to_corners(a), to_corners(b)); }

double l1_box(const Box& a, const Box& b) {
  return std::abs(a.cx() - b.cx()) + std::abs(a.cy() - b.cy()) + std::abs(a.h() - b.h()) +
         std::abs(a.w() - b.w());
}

}  // namespace smdt
