#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "tcagu/errors.hpp"
#include "tcagu/train.hpp"

using namespace tcagu;

namespace {

HsiCube small_scene(std::uint64_t seed) {
  SynthSpec s;
  s.height = 8;
  s.width = 8;
  s.bands = 10;
  s.endmembers = 3;
  s.snr_db = 30;
  s.seed = seed;
  return generate_synthetic(s);
}

TrainConfig small_config(std::size_t epochs = 3) {
  TrainConfig c;
  c.model.bands = 10;
  c.model.endmembers = 3;
  c.model.channels = 4;
  c.model.spectral_dim = 6;
  c.model.spatial_dim = 6;
  c.model.fused_channels = 6;
  c.model.patch_size = 2;
  c.model.k_steps = 2;
  c.model.beta = 0.5;
  c.epochs = epochs;
  c.seed = 4;
  return c;
}

std::vector<double> flat_params(TrainState& s) {
  std::vector<double> out;
  s.params.visit([&](const std::string&, ad::Tensor& t) { out.insert(out.end(), t.data.begin(), t.data.end()); });
  return out;
}

}  // namespace

TEST(Adam, FirstTwoStepsMatchHandComputation) {
  const HsiCube cube = small_scene(1);
  TrainConfig cfg = small_config();
  cfg.lr = 0.01;
  cfg.weight_decay = 0.1;
  TrainState s = start_training(cfg, cube);

  ad::Tensor& w = s.params.decoder.abun_b;
  ad::Tensor& untouched = s.params.frontend.conv1_w;
  const std::vector<double> w0 = w.data, u0 = untouched.data;
  const std::vector<double> g1 = {0.5, -2.0, 1e-3}, g2 = {-0.25, 1.0, 3.0};
  ASSERT_EQ(w.size(), 3u);

  // hand AdamW, decay then Adam
  std::vector<double> p = w0, m(3, 0.0), v(3, 0.0);
  for (int step = 1; step <= 2; ++step) {
    const auto& g = step == 1 ? g1 : g2;
    w.grad = g;
    optimizer_step(s);
    for (int k = 0; k < 3; ++k) {
      p[k] *= 1.0 - 0.01 * 0.1;
      m[k] = 0.9 * m[k] + 0.1 * g[k];
      v[k] = 0.999 * v[k] + 0.001 * g[k] * g[k];
      const double mh = m[k] / (1.0 - std::pow(0.9, step)), vh = v[k] / (1.0 - std::pow(0.999, step));
      p[k] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(w.data[k], p[k], 1e-14) << "step " << step;
    EXPECT_FALSE(w.has_grad());
  }
  // no gradient → no decay, no update
  EXPECT_EQ(untouched.data, u0);
  EXPECT_EQ(s.step, 2u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  TrainState s = start_training(small_config(), small_scene(2));
  ad::Tensor& w = s.params.attention.fuse_b;
  const std::vector<double> before = w.data;
  w.grad.assign(w.size(), 0.0);
  for (std::size_t k = 0; k < w.size(); ++k) w.grad[k] = (k % 2 ? -1.0 : 1.0) * (0.1 + k);
  optimizer_step(s);
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double decayed = before[k] * (1.0 - 1e-3 * 1e-5);
    EXPECT_NEAR(decayed - w.data[k], (k % 2 ? -1.0 : 1.0) * 1e-3, 1e-9);
  }
}

TEST(Adam, EndmembersClampedAfterStep) {
  TrainState s = start_training(small_config(), small_scene(3));
  ad::Tensor& e = s.params.decoder.endmembers;
  e.data[0] = 1e-4;
  e.grad.assign(e.size(), 0.0);
  e.grad[0] = 10.0;  // pushes entry 0 by -lr below zero
  optimizer_step(s);
  EXPECT_EQ(e.data[0], 0.0);
  for (double x : e.data) EXPECT_GE(x, 0.0);
}

TEST(Training, InvariantsHoldEveryEpoch) {
  const HsiCube cube = small_scene(5);
  std::size_t seen = 0;
  train(small_config(4), cube, [&](const EpochReport& r) {
    ++seen;
    EXPECT_EQ(r.epoch, seen);
    EXPECT_TRUE(std::isfinite(r.loss));
    EXPECT_NEAR(r.loss, r.reconstruction + r.angle, 1e-12);
    const Eigen::MatrixXd a = abundance_matrix(*r.forward);
    EXPECT_GE(a.minCoeff(), 0.0);
    EXPECT_LT((a.colwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
    EXPECT_GE(r.state->params.decoder.endmembers.data.size(), 30u);
    for (double x : r.state->params.decoder.endmembers.data) EXPECT_GE(x, 0.0);
    ad::Tape tape;
    auto& graph = const_cast<TrainState*>(r.state)->params.graph;
    const auto& alpha = mixing_weights(tape, graph).value();
    double sum = 0.0;
    for (double x : alpha) {
      EXPECT_GT(x, 0.0);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  });
  EXPECT_EQ(seen, 4u);
}

TEST(Training, LossDecreasesOnSmallScene) {
  TrainConfig cfg = small_config(30);
  cfg.lr = 5e-3;
  const TrainState s = train(cfg, small_scene(6));
  ASSERT_EQ(s.loss_history.size(), 30u);
  EXPECT_LT(s.loss_history.back(), s.loss_history.front());
}

TEST(Training, DeterministicBytes) {
  const HsiCube cube = small_scene(7);
  const auto a = encode_checkpoint(train(small_config(), cube));
  const auto b = encode_checkpoint(train(small_config(), cube));
  EXPECT_EQ(a, b);
  TrainConfig other = small_config();
  other.seed = 5;
  EXPECT_NE(a, encode_checkpoint(train(other, cube)));
}

TEST(Training, ResumeEqualsUninterrupted) {
  const HsiCube cube = small_scene(8);
  const TrainState full = train(small_config(5), cube);
  TrainState part = decode_checkpoint(encode_checkpoint(train(small_config(3), cube)));
  part.config.epochs += 2;
  run_epochs(part, cube, 2);
  EXPECT_EQ(encode_checkpoint(part), encode_checkpoint(full));
}

TEST(Training, NonFiniteLossNamesFirstBadOp) {
  const HsiCube cube = small_scene(9);
  TrainState s = start_training(small_config(), cube);
  for (double& v : s.params.frontend.conv1_w.data) v = 1e308;
  try {
    run_epochs(s, cube, 1);
    FAIL();
  } catch (const NumericDomainError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(conv2d)"), std::string::npos) << msg;
  }
  EXPECT_EQ(s.epoch, 0u);
}

TEST(Training, BandMismatchIsConfigError) {
  TrainConfig cfg = small_config();
  cfg.model.bands = 12;
  EXPECT_THROW(start_training(cfg, small_scene(1)), ConfigError);
}

TEST(Config, ValidationRejectsBadValues) {
  TrainConfig c = small_config();
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.weight_decay = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.model.spatial_dim = 7;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  TrainConfig c = small_config();
  c.model.graph_mode = GraphMode::static_grid;
  c.model.sigma_g = 2.5;
  c.model.square_sigma_f = true;
  c.lr = 0.0123;
  c.data_path = "scene.hsic";
  const TrainConfig r = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(r), config_to_json(c));
  EXPECT_EQ(r.model.graph_mode, GraphMode::static_grid);
  EXPECT_EQ(r.lr, 0.0123);
  EXPECT_THROW(config_from_json("{not json"), FormatError);
}

TEST(Checkpoint, FileRoundTripIsBitExact) {
  const HsiCube cube = small_scene(10);
  TrainState s = train(small_config(2), cube);
  const auto path = std::filesystem::temp_directory_path() / "tcagu_test_ckpt.tckp";
  save_checkpoint(s, path);
  TrainState r = load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(encode_checkpoint(r), encode_checkpoint(s));
  EXPECT_EQ(flat_params(r), flat_params(s));
  EXPECT_EQ(r.epoch, 2u);
  EXPECT_EQ(r.step, 2u);
  EXPECT_EQ(r.loss_history, s.loss_history);
  for (std::size_t i = 0; i < s.adam_m.size(); ++i) {
    EXPECT_EQ(r.adam_m[i].data, s.adam_m[i].data);
    EXPECT_EQ(r.adam_v[i].data, s.adam_v[i].data);
  }
}

TEST(Checkpoint, CorruptionReportsOffset) {
  auto bytes = encode_checkpoint(start_training(small_config(), small_scene(11)));
  auto bad = bytes;
  bad[1] = 'X';
  try {
    decode_checkpoint(bad);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  bad = bytes;
  bad.resize(bytes.size() - 5);
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt.tckp"), IoError);
}
