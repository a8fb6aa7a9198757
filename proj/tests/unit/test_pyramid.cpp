#include <gtest/gtest.h>

#include <cmath>

#include "facercnn/pyramid.hpp"

using namespace facercnn;

namespace {
Tensor ramp(int h, int w) {
  Tensor t({1, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) t.at(0, y, x) = (x + 0.5 * y) / (w + 0.5 * h);
  return t;
}
}  // namespace

TEST(Resize, UnitScaleIsIdentity) {
  const Tensor t = ramp(12, 16);
  const Tensor r = resize_image(t, 1.0);
  EXPECT_EQ(r.shape, t.shape);
  EXPECT_EQ(r.data, t.data);
}

TEST(Resize, OutputIsStrideAligned) {
  const Tensor r = resize_image(Tensor({1, 64, 64}), 0.7);
  EXPECT_EQ(r.height(), 44);
  EXPECT_EQ(r.width(), 44);
  EXPECT_EQ(resize_image(Tensor({1, 64, 64}), 2.0).height(), 128);
  EXPECT_THROW(resize_image(Tensor({1, 64, 64}), 0.1), std::invalid_argument);
  EXPECT_THROW(resize_image(Tensor({1, 64, 64}), 0.0), std::invalid_argument);
}

TEST(Resize, ConstantStaysConstant) {
  const Tensor t({1, 32, 40}, 0.3);
  for (double s : {0.5, 0.75, 1.5, 2.0})
    for (double v : resize_image(t, s).data) EXPECT_NEAR(v, 0.3, 1e-15);
}

TEST(Resize, RampRoundTrip) {
  const Tensor t = ramp(64, 64);
  const Tensor back = resize_image(resize_image(t, 0.5), 2.0);
  ASSERT_EQ(back.shape, t.shape);
  double worst = 0;
  for (int y = 2; y < 62; ++y)
    for (int x = 2; x < 62; ++x) worst = std::max(worst, std::abs(back.at(0, y, x) - t.at(0, y, x)));
  EXPECT_LT(worst, 0.02);
}

TEST(Resize, SamplingGridMapsBoxesByScale) {
  // A linear image sampled at output centre u reads input (u + 0.5) / s - 0.5.
  Tensor t({1, 32, 32});
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) t.at(0, y, x) = x;
  const Tensor r = resize_image(t, 2.0);
  for (int x = 2; x < 60; ++x) EXPECT_NEAR(r.at(0, 10, x), (x + 0.5) / 2.0 - 0.5, 1e-12);
}

TEST(TrainingScale, UniformOverTheSet) {
  std::mt19937_64 rng(12);
  const ScaleSet set;
  int counts[3] = {0, 0, 0};
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double s = pick_training_scale(rng, set);
    for (int k = 0; k < 3; ++k)
      if (s == set.scales[k]) ++counts[k];
  }
  EXPECT_EQ(counts[0] + counts[1] + counts[2], n);
  double chi2 = 0;
  for (int c : counts) chi2 += (c - n / 3.0) * (c - n / 3.0) / (n / 3.0);
  // Two degrees of freedom: mean 2, sd 2.
  EXPECT_LT(chi2, 2 + 3 * 2);
}

TEST(TrainingScale, DeterministicForASeed) {
  std::mt19937_64 a(5), b(5);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(pick_training_scale(a, {}), pick_training_scale(b, {}));
}

TEST(Merge, MapsBackByScale) {
  const auto out = merge_multiscale({{{10, 10, 20, 20}, 0.9, 2}}, {});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].box, (Box{5, 5, 10, 10}));
  const auto half = merge_multiscale({{{10, 10, 20, 20}, 0.9, 0}}, {});
  EXPECT_EQ(half[0].box, (Box{20, 20, 40, 40}));
}

TEST(Merge, CoincidentBoxesAcrossScalesCollapse) {
  const std::vector<Detection> d{{{5, 5, 10, 10}, 0.6, 1}, {{10, 10, 20, 20}, 0.8, 2}, {{2.5, 2.5, 5, 5}, 0.7, 0}};
  const auto out = merge_multiscale(d, {});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].score, 0.8);
  EXPECT_EQ(out[0].scale_id, 2);
}

TEST(Merge, UnknownScaleIdThrows) {
  EXPECT_THROW(merge_multiscale({{{0, 0, 4, 4}, 0.5, 3}}, {}), std::invalid_argument);
  EXPECT_THROW(merge_multiscale({{{0, 0, 4, 4}, 0.5, -1}}, {}), std::invalid_argument);
  EXPECT_THROW(merge_multiscale({}, ScaleSet{{2.0, 1.0}}), std::invalid_argument);
}
