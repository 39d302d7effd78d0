#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "smdt/errors.hpp"
#include "smdt/geometry.hpp"

using namespace smdt;

namespace {

CornerBox random_corner(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x1 = u(rng), x2 = u(rng), y1 = u(rng), y2 = u(rng);
  if (x1 > x2) std::swap(x1, x2);
  if (y1 > y2) std::swap(y1, y2);
  return {x1, y1, x2 + 1e-3, y2 + 1e-3};
}

}  // namespace

TEST(Geometry, ToCornersExamples) {
  EXPECT_EQ(to_corners(Box(0.5, 0.5, 0.5, 0.5)), (CornerBox{0.25, 0.25, 0.75, 0.75}));
  EXPECT_EQ(to_corners(Box(0.5, 0.5, 1, 1)), (CornerBox{0, 0, 1, 1}));
  const CornerBox c = to_corners(Box(0.3, 0.7, 0.2, 0.4));
  EXPECT_NEAR(c.x1, 0.1, 1e-12);
  EXPECT_NEAR(c.y1, 0.6, 1e-12);
  EXPECT_NEAR(c.x2, 0.5, 1e-12);
  EXPECT_NEAR(c.y2, 0.8, 1e-12);
}

TEST(Geometry, BoxRejectsInvalidFields) {
  EXPECT_THROW(Box(0.5, 0.5, -0.1, 0.2), InputError);
  EXPECT_THROW(Box(std::nan(""), 0.5, 0.1, 0.2), InputError);
  EXPECT_THROW(from_corners({0.5, 0.0, 0.4, 1.0}), InputError);
}

TEST(Geometry, CornerRoundTrip) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 1000; ++k) {
    const CornerBox c = random_corner(rng);
    const CornerBox back = to_corners(from_corners(c));
    EXPECT_NEAR(back.x1, c.x1, 1e-12);
    EXPECT_NEAR(back.y1, c.y1, 1e-12);
    EXPECT_NEAR(back.x2, c.x2, 1e-12);
    EXPECT_NEAR(back.y2, c.y2, 1e-12);
  }
}

TEST(Geometry, IouExamples) {
  const CornerBox unit{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(iou(unit, unit), 1.0);
  EXPECT_DOUBLE_EQ(iou(unit, {2, 0, 3, 1}), 0.0);
  EXPECT_NEAR(iou(unit, {0.5, 0, 1.5, 1}), 1.0 / 3.0, 1e-9);
}

TEST(Geometry, GiouExamples) {
  const CornerBox unit{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(giou(unit, unit), 1.0);
  EXPECT_NEAR(giou(unit, {2, 0, 3, 1}), -1.0 / 3.0, 1e-9);
  EXPECT_NEAR(giou(unit, {0.5, 0, 1.5, 1}), 1.0 / 3.0, 1e-9);
}

TEST(Geometry, GiouLossExamples) {
  const Box a = from_corners({0, 0, 1, 1});
  EXPECT_NEAR(giou_loss(a, a), 0.0, 1e-12);
  EXPECT_NEAR(giou_loss(a, from_corners({2, 0, 3, 1})), 4.0 / 3.0, 1e-9);
  EXPECT_NEAR(giou_loss(a, from_corners({0.5, 0, 1.5, 1})), 2.0 / 3.0, 1e-9);
}

TEST(Geometry, L1Examples) {
  const Box a(0.5, 0.5, 0.5, 0.5);
  EXPECT_DOUBLE_EQ(l1_box(a, a), 0.0);
  EXPECT_NEAR(l1_box(Box(0.2, 0.3, 0.4, 0.1), Box(0.3, 0.4, 0.5, 0.2)), 0.4, 1e-12);
  EXPECT_NEAR(l1_box(a, Box(0.3, 0.7, 0.2, 0.4)), 0.8, 1e-12);
}

TEST(Geometry, DegenerateBoxes) {
  const GiouResult r = giou_checked({0.3, 0.3, 0.3, 0.3}, {0.6, 0.6, 0.6, 0.6});
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_TRUE(std::isfinite(iou({0.3, 0.3, 0.3, 0.3}, {0.3, 0.3, 0.3, 0.3})));
}

TEST(Geometry, SymmetryAndOrdering) {
  std::mt19937_64 rng(11);
  for (int k = 0; k < 10000; ++k) {
    const CornerBox a = random_corner(rng), b = random_corner(rng);
    const double ab = iou(a, b);
    EXPECT_EQ(ab, iou(b, a));
    const double g = giou(a, b);
    EXPECT_LE(g, ab + 1e-15);
    EXPECT_GT(g, -1.0);
    EXPECT_LE(g, 1.0);
  }
}

TEST(Geometry, GiouApproachesMinusOneWhenFarApart) {
  const CornerBox a{0, 0, 1e-3, 1e-3};
  const CornerBox b{1000, 1000, 1000.001, 1000.001};
  EXPECT_LT(giou(a, b), -0.999);
  EXPECT_GT(giou(a, b), -1.0);
}

TEST(Geometry, ClampedClipsCornersToUnitSquare) {
  const Box b = Box(0.9, 0.1, 0.4, 0.4).clamped();
  const CornerBox c = to_corners(b);
  EXPECT_NEAR(c.x1, 0.7, 1e-12);
  EXPECT_NEAR(c.x2, 1.0, 1e-12);
  EXPECT_NEAR(c.y1, 0.0, 1e-12);
  EXPECT_NEAR(c.y2, 0.3, 1e-12);
}

TEST(Geometry, MonteCarloOracleAgreement) {
  std::mt19937_64 rng(17);
  for (int k = 0; k < 20; ++k) {
    const CornerBox a = random_corner(rng), b = random_corner(rng);
    const auto mc = oracle::monte_carlo_overlap(a, b, 200000, 100 + k);
    EXPECT_NEAR(iou(a, b), mc.iou, 5e-3);
    EXPECT_NEAR(giou(a, b), mc.giou, 5e-3);
  }
}
