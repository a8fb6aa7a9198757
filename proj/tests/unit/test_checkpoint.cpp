#include <gtest/gtest.h>

#include <filesystem>

#include "facercnn/checkpoint.hpp"
#include "facercnn/detector.hpp"

using namespace facercnn;

namespace {
bool same_params(const DetectorModel& a, const DetectorModel& b) {
  const auto pa = a.named_params(), pb = b.named_params();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i].second->data != pb[i].second->data || pa[i].second->shape != pb[i].second->shape) return false;
  return true;
}
}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  const Config cfg;
  TrainState s = TrainState::init(cfg);
  s.centers.values.data = {0.1, 1.0 / 3.0, -2.5, 1e-300};
  s.centers.values.data.resize(s.centers.values.rows * s.centers.values.cols, 0.7);
  const std::string bytes = serialize_checkpoint(s.model, s.centers, 42, architecture_digest(cfg));
  const Checkpoint ck = parse_checkpoint(bytes, cfg);
  EXPECT_EQ(ck.step, 42u);
  EXPECT_TRUE(same_params(ck.model, s.model));
  EXPECT_EQ(ck.centers.values.data, s.centers.values.data);
  EXPECT_EQ(serialize_checkpoint(ck.model, ck.centers, ck.step, architecture_digest(cfg)), bytes);
}

TEST(Checkpoint, FileRoundTrip) {
  const Config cfg;
  const TrainState s = TrainState::init(cfg);
  const auto path = (std::filesystem::temp_directory_path() / "facercnn_ckpt_test.bin").string();
  save_checkpoint(path, s.model, s.centers, 0, cfg);
  const Checkpoint ck = load_checkpoint(path, cfg);
  EXPECT_TRUE(same_params(ck.model, s.model));
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path, cfg), std::runtime_error);
}

TEST(Checkpoint, DigestMismatchFails) {
  const Config cfg;
  const TrainState s = TrainState::init(cfg);
  const std::string bytes = serialize_checkpoint(s.model, s.centers, 0, architecture_digest(cfg));
  Config other = cfg;
  other.model.hidden = 32;
  EXPECT_THROW(parse_checkpoint(bytes, other), std::runtime_error);
  // Training-only keys do not change the digest.
  Config lr = cfg;
  lr.learning_rate = 0.5;
  lr.weights.mu = 0.0;
  EXPECT_EQ(architecture_digest(lr), architecture_digest(cfg));
  EXPECT_NO_THROW(parse_checkpoint(bytes, lr));
}

TEST(Checkpoint, TruncationAndGarbageFail) {
  const Config cfg;
  const TrainState s = TrainState::init(cfg);
  const std::string bytes = serialize_checkpoint(s.model, s.centers, 0, architecture_digest(cfg));
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 3), cfg), std::runtime_error);
  EXPECT_THROW(parse_checkpoint(bytes + "x", cfg), std::runtime_error);
  EXPECT_THROW(parse_checkpoint("not a checkpoint", cfg), std::runtime_error);
  EXPECT_THROW(parse_checkpoint("", cfg), std::runtime_error);
}

TEST(Checkpoint, ZeroStepsEqualsInitialization) {
  Config cfg;
  cfg.steps = 0;
  TrainState s = TrainState::init(cfg);
  std::vector<Scene> one{generate_scene(cfg.scene, 0)};
  train(s, one, cfg);
  EXPECT_TRUE(same_params(s.model, DetectorModel::init(cfg.model, cfg.seed)));
}
