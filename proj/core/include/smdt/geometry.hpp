#pragma once

#include <array>

namespace smdt {

/// Guards union and enclosing-box areas against division by zero.
inline constexpr double kAreaEps = 1e-9;

/// Normalized center-size box. Field order follows (cx, cy, h, w): height
/// comes before width, unlike most detection code.
class Box {
 public:
  Box() = default;
  /// Throws InputError on non-finite fields or negative extent.
  Box(double cx, double cy, double h, double w);

  double cx() const { return cx_; }
  double cy() const { return cy_; }
  double h() const { return h_; }
  double w() const { return w_; }
  std::array<double, 4> as_array() const { return {cx_, cy_, h_, w_}; }

  /// Corners clipped to the unit square. Geometry ops never clamp on their own.
  Box clamped() const;

  friend bool operator==(const Box&, const Box&) = default;

 private:
  double cx_ = 0.0;
  double cy_ = 0.0;
  double h_ = 0.0;
  double w_ = 0.0;
};

/// Corner form, x1 <= x2 and y1 <= y2.
struct CornerBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double area() const { return (x2 - x1) * (y2 - y1); }
  friend bool operator==(const CornerBox&, const CornerBox&) = default;
};

CornerBox to_corners(const Box& b);
/// Throws InputError when the corners are inverted or non-finite.
Box from_corners(const CornerBox& c);

double iou(const CornerBox& a, const CornerBox& b);

struct GiouResult {
  double value = 0.0;
  /// Both boxes have zero area; `value` is then 0 by convention.
  bool degenerate = false;
};

GiouResult giou_checked(const CornerBox& a, const CornerBox& b);
inline double giou(const CornerBox& a, const CornerBox& b) { return giou_checked(a, b).value; }

/// 1 - GIoU, in [0, 2).
double giou_loss(const Box& a, const Box& b);
/// Sum of absolute differences over (cx, cy, h, w).
double l1_box(const Box& a, const Box& b);

}  // namespace smdt
