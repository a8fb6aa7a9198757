#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "facercnn/geometry.hpp"

using namespace facercnn;

namespace {

// Area fraction of an n x n grid over [0, extent)^2 whose cell centres fall
// inside both / either box.
double grid_iou(const Box& a, const Box& b, double extent, int n) {
  const double step = extent / n;
  long inter = 0, uni = 0;
  for (int i = 0; i < n; ++i) {
    const double y = (i + 0.5) * step;
    for (int j = 0; j < n; ++j) {
      const double x = (j + 0.5) * step;
      const bool ia = x >= a.x1 && x < a.x2 && y >= a.y1 && y < a.y2;
      const bool ib = x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
      inter += ia && ib;
      uni += ia || ib;
    }
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

Box random_box(std::mt19937_64& rng, double extent) {
  std::uniform_real_distribution<double> u(0, extent);
  double x1 = u(rng), x2 = u(rng), y1 = u(rng), y2 = u(rng);
  if (x1 > x2) std::swap(x1, x2);
  if (y1 > y2) std::swap(y1, y2);
  return {x1, y1, x2 + 0.05, y2 + 0.05};
}

}  // namespace

TEST(Iou, IdentityDisjointAndTouching) {
  const Box b{1, 2, 5, 9};
  EXPECT_DOUBLE_EQ(iou(b, b), 1.0);
  EXPECT_EQ(iou(b, {10, 10, 12, 12}), 0.0);
  EXPECT_EQ(iou(b, {5, 2, 8, 9}), 0.0);
}

TEST(Iou, HalfOverlapIsOneThird) { EXPECT_DOUBLE_EQ(iou({0, 0, 2, 2}, {1, 0, 3, 2}), 1.0 / 3.0); }

TEST(Iou, DegenerateBoxesGiveZero) {
  EXPECT_EQ(iou({1, 1, 1, 1}, {1, 1, 1, 1}), 0.0);
  EXPECT_EQ(iou({0, 0, 0, 4}, {0, 0, 4, 4}), 0.0);
}

TEST(Iou, Symmetric) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 200; ++k) {
    const Box a = random_box(rng, 20), b = random_box(rng, 20);
    EXPECT_EQ(iou(a, b), iou(b, a));
  }
}

TEST(Iou, AgreesWithPixelEnumeration) {
  std::mt19937_64 rng(11);
  for (int k = 0; k < 100; ++k) {
    const Box a = random_box(rng, 10), b = random_box(rng, 10);
    EXPECT_NEAR(iou(a, b), grid_iou(a, b, 11, 600), 1e-2);
  }
}

TEST(Iou, ExactOnDyadicCoordinates) {
  // Quarter-pixel coordinates: areas are exact in binary, so the quotient is
  // the correctly rounded rational.
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> u(0, 64);
  for (int k = 0; k < 500; ++k) {
    int c[8];
    for (int& v : c) v = u(rng);
    const int ax1 = std::min(c[0], c[1]), ax2 = std::max(c[0], c[1]) + 1;
    const int ay1 = std::min(c[2], c[3]), ay2 = std::max(c[2], c[3]) + 1;
    const int bx1 = std::min(c[4], c[5]), bx2 = std::max(c[4], c[5]) + 1;
    const int by1 = std::min(c[6], c[7]), by2 = std::max(c[6], c[7]) + 1;
    const long iw = std::max(0, std::min(ax2, bx2) - std::max(ax1, bx1));
    const long ih = std::max(0, std::min(ay2, by2) - std::max(ay1, by1));
    const long inter = iw * ih;
    const long uni = static_cast<long>(ax2 - ax1) * (ay2 - ay1) + static_cast<long>(bx2 - bx1) * (by2 - by1) - inter;
    const Box a{ax1 / 4.0, ay1 / 4.0, ax2 / 4.0, ay2 / 4.0}, b{bx1 / 4.0, by1 / 4.0, bx2 / 4.0, by2 / 4.0};
    EXPECT_EQ(iou(a, b), static_cast<double>(inter) / static_cast<double>(uni));
  }
}

TEST(Anchors, SingleCell) {
  const auto a = generate_anchors({16, {16}, {1}}, 1, 1);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0], (Box{0, 0, 16, 16}));
}

TEST(Anchors, RatioPreservesArea) {
  const auto a = generate_anchors({16, {16}, {4}}, 1, 1);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_DOUBLE_EQ(a[0].width(), 8.0);
  EXPECT_DOUBLE_EQ(a[0].height(), 32.0);
  EXPECT_DOUBLE_EQ(a[0].center_x(), 8.0);
  EXPECT_DOUBLE_EQ(a[0].center_y(), 8.0);
}

TEST(Anchors, CountAndOrder) {
  const AnchorSpec spec{4, {8, 16}, {1.0, 1.3}};
  const auto a = generate_anchors(spec, 2, 2);
  ASSERT_EQ(a.size(), 16u);
  // Row-major cells, then scales, then ratios.
  for (int cy = 0; cy < 2; ++cy) {
    for (int cx = 0; cx < 2; ++cx) {
      for (int s = 0; s < 2; ++s) {
        for (int r = 0; r < 2; ++r) {
          const Box& b = a[((cy * 2 + cx) * 2 + s) * 2 + r];
          EXPECT_DOUBLE_EQ(b.center_x(), (cx + 0.5) * 4);
          EXPECT_DOUBLE_EQ(b.center_y(), (cy + 0.5) * 4);
          EXPECT_NEAR(b.width(), spec.scales[s] / std::sqrt(spec.aspect_ratios[r]), 1e-12);
          EXPECT_NEAR(b.height(), spec.scales[s] * std::sqrt(spec.aspect_ratios[r]), 1e-12);
        }
      }
    }
  }
}

TEST(Anchors, RejectsBadSpec) {
  EXPECT_THROW(generate_anchors({0, {8}, {1}}, 1, 1), std::invalid_argument);
  EXPECT_THROW(generate_anchors({4, {}, {1}}, 1, 1), std::invalid_argument);
  EXPECT_THROW(generate_anchors({4, {8}, {-1}}, 1, 1), std::invalid_argument);
}

TEST(Delta, IdentityAndInverse) {
  const Box a{3, 4, 11, 20};
  const Delta d = encode_delta(a, a);
  EXPECT_EQ(d.dx, 0.0);
  EXPECT_EQ(d.dy, 0.0);
  EXPECT_EQ(d.dw, 0.0);
  EXPECT_EQ(d.dh, 0.0);
  EXPECT_EQ(decode_delta({}, a), a);
}

TEST(Delta, RoundTrip) {
  std::mt19937_64 rng(17);
  for (int k = 0; k < 10000; ++k) {
    const Box anchor = random_box(rng, 100), gt = random_box(rng, 100);
    const Box back = decode_delta(encode_delta(gt, anchor), anchor);
    EXPECT_NEAR(back.x1, gt.x1, 1e-9);
    EXPECT_NEAR(back.y1, gt.y1, 1e-9);
    EXPECT_NEAR(back.x2, gt.x2, 1e-9);
    EXPECT_NEAR(back.y2, gt.y2, 1e-9);
  }
}

TEST(Delta, DegenerateReferenceThrows) {
  EXPECT_THROW(encode_delta({0, 0, 2, 2}, {1, 1, 1, 3}), std::invalid_argument);
  EXPECT_THROW(encode_delta({0, 0, 0, 2}, {0, 0, 2, 2}), std::invalid_argument);
  EXPECT_THROW(decode_delta({}, {0, 0, 0, 0}), std::invalid_argument);
}

TEST(Clip, Cases) {
  EXPECT_EQ(clip_box({1, 1, 5, 5}, 8, 8), (Box{1, 1, 5, 5}));
  EXPECT_EQ(clip_box({-5, -5, 10, 10}, 8, 8), (Box{0, 0, 8, 8}));
  const Box out = clip_box({10, 12, 20, 30}, 8, 8);
  EXPECT_EQ(out.area(), 0.0);
  EXPECT_EQ(out, (Box{8, 8, 8, 8}));
}

TEST(Nms, Basics) {
  EXPECT_TRUE(nms({}, 0.5).empty());
  const Detection d{{0, 0, 4, 4}, 0.7, 0};
  const auto one = nms({d}, 0.5);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].box, d.box);
  EXPECT_EQ(one[0].score, d.score);
  const auto two = nms({{{0, 0, 4, 4}, 0.8, 0}, {{0, 0, 4, 4}, 0.9, 0}}, 0.5);
  ASSERT_EQ(two.size(), 1u);
  EXPECT_EQ(two[0].score, 0.9);
}

TEST(Nms, TiesKeepLowerIndex) {
  const auto keep = nms_indices({{{0, 0, 4, 4}, 0.5, 0}, {{0, 0, 4, 4}, 0.5, 1}}, 0.5);
  ASSERT_EQ(keep.size(), 1u);
  EXPECT_EQ(keep[0], 0u);
}

TEST(Nms, SuppressesOnlyAboveThreshold) {
  // IoU exactly 0.5 is not suppressed at threshold 0.5.
  const std::vector<Detection> d{{{0, 0, 4, 4}, 0.9, 0}, {{0, 0, 4, 2}, 0.8, 0}};
  EXPECT_EQ(nms(d, 0.5).size(), 2u);
  EXPECT_EQ(nms(d, 0.49).size(), 1u);
}

TEST(Nms, MatchesQuadraticReference) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 200;
    std::vector<Detection> dets(n);
    std::uniform_real_distribution<double> s(0, 1);
    for (auto& d : dets) d = {random_box(rng, 50), std::round(s(rng) * 20) / 20, 0};
    // Reference: rank by (score desc, index asc); keep i iff no kept
    // higher-ranked box overlaps it above the threshold.
    std::vector<std::size_t> rank(n);
    for (std::size_t i = 0; i < n; ++i) rank[i] = i;
    std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    std::vector<std::size_t> ref;
    for (std::size_t r = 0; r < n; ++r) {
      bool ok = true;
      for (std::size_t k : ref) ok = ok && iou(dets[k].box, dets[rank[r]].box) <= 0.3;
      if (ok) ref.push_back(rank[r]);
    }
    EXPECT_EQ(nms_indices(dets, 0.3), ref);
  }
}
