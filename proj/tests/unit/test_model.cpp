#include <gtest/gtest.h>

#include <set>

#include "facercnn/gradcheck.hpp"
#include "facercnn/model.hpp"

using namespace facercnn;

TEST(Model, TrunkShapes) {
  const ModelConfig mc;
  const DetectorModel m = DetectorModel::init(mc, 3);
  const TrunkCache c = forward_trunk(m, Tensor({1, 64, 64}, 0.5));
  EXPECT_EQ(c.feature_map().shape, (std::vector<int>{mc.conv2_channels, 16, 16}));
  EXPECT_EQ(c.rpn_logits.shape, (std::vector<int>{2 * mc.anchors_per_cell(), 16, 16}));
  EXPECT_EQ(c.rpn_deltas.shape, (std::vector<int>{4 * mc.anchors_per_cell(), 16, 16}));
  const std::vector<Box> rois{{0, 0, 20, 20}, {10, 12, 40, 50}};
  const HeadCache h = forward_head(m, c.feature_map(), rois);
  EXPECT_EQ(h.logits.rows, 2u);
  EXPECT_EQ(h.logits.cols, 2u);
  EXPECT_EQ(h.deltas.cols, 4u);
  EXPECT_EQ(h.features.cols, static_cast<std::size_t>(mc.feature_dim));
}

TEST(Model, RejectsBadImages) {
  const DetectorModel m = DetectorModel::init({}, 3);
  EXPECT_THROW(forward_trunk(m, Tensor({1, 30, 32})), std::invalid_argument);
  EXPECT_THROW(forward_trunk(m, Tensor({2, 32, 32})), std::invalid_argument);
}

TEST(Model, ConstantImageGivesEqualLogitsPerInteriorCell) {
  // Mid-grey input is zero after centring; with zero biases every activation
  // is zero, so all cells agree.
  const DetectorModel m = DetectorModel::init({}, 9);
  const TrunkCache c = forward_trunk(m, Tensor({1, 32, 32}, 0.5));
  for (double v : c.rpn_logits.data) EXPECT_EQ(v, 0.0);
  for (double v : c.rpn_deltas.data) EXPECT_EQ(v, 0.0);
}

TEST(Model, ParameterNamesAreUniqueAndInitDeterministic) {
  DetectorModel a = DetectorModel::init({}, 5), b = DetectorModel::init({}, 5), c = DetectorModel::init({}, 6);
  std::set<std::string> names;
  for (auto& [n, t] : a.named_params()) {
    names.insert(n);
    for (double v : t->data) EXPECT_TRUE(std::isfinite(v));
  }
  EXPECT_EQ(names.size(), a.named_params().size());
  EXPECT_EQ(a.conv1_w.data, b.conv1_w.data);
  EXPECT_NE(a.conv1_w.data, c.conv1_w.data);
  for (double v : a.conv1_b.data) EXPECT_EQ(v, 0.0);
  EXPECT_GT(a.parameter_count(), 0u);
}

TEST(Model, InvalidConfigThrows) {
  ModelConfig mc;
  mc.hidden = 0;
  EXPECT_THROW(DetectorModel::init(mc, 1), std::invalid_argument);
  mc = {};
  mc.anchors.base_stride = 8;
  EXPECT_THROW(DetectorModel::init(mc, 1), std::invalid_argument);
}

TEST(GradCheck, FullNetwork) {
  const GradCheckResult r = check_network();
  EXPECT_TRUE(r.passed()) << "max error " << r.max_error;
  EXPECT_EQ(r.cases, 20);
}
