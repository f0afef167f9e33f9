#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "tcagu/errors.hpp"
#include "tcagu/transformer.hpp"

using namespace tcagu;
using namespace tcagu::testing_support;

namespace {

ModelConfig small_config(std::size_t dim = 4, std::size_t m = 2) {
  ModelConfig cfg;
  cfg.bands = 8;
  cfg.endmembers = 2;
  cfg.channels = 3;
  cfg.spectral_dim = dim;
  cfg.spatial_dim = dim;
  cfg.fused_channels = 3;
  cfg.patch_size = m;
  return cfg;
}

TokenSequences random_tokens(ad::Tape& tape, std::size_t rows, std::size_t cols, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TokenSequences t;
  t.grid_rows = rows;
  t.grid_cols = cols;
  t.spectral = tape.constant(random_tensor({rows * cols, dim}, rng));
  t.spatial = tape.constant(random_tensor({rows * cols, dim}, rng));
  return t;
}

ad::Tensor identity(std::size_t d) {
  ad::Tensor t = ad::Tensor::zeros({d, d});
  for (std::size_t i = 0; i < d; ++i) t.data[i * d + i] = 1.0;
  return t;
}

// softmax(QKᵀ/√d)V written with explicit loops.
std::vector<double> loop_attention(const ad::Tensor& x, const ad::Tensor& wq, const ad::Tensor& wk,
                                   const ad::Tensor& wv) {
  const std::size_t n = x.shape[0], d = x.shape[1];
  auto proj = [&](const ad::Tensor& w) {
    std::vector<double> out(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t k = 0; k < d; ++k) out[i * d + j] += x.data[i * d + k] * w.data[k * d + j];
    return out;
  };
  const auto q = proj(wq), k = proj(wk), v = proj(wv);
  std::vector<double> out(n * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(n);
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += q[i * d + c] * k[j * d + c];
      s[j] = dot / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (double& e : s) z += (e = std::exp(e - mx));
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] += s[j] / z * v[j * d + c];
  }
  return out;
}

}  // namespace

TEST(Attention, ZeroLogitsAverageValues) {
  ad::Tape tape;
  ad::Tensor x({2, 3}, {1, 2, 3, 5, -1, 0});
  ad::Var out = attention(tape.constant(x), tape.constant(ad::Tensor::zeros({3, 3})),
                          tape.constant(ad::Tensor::zeros({3, 3})), tape.constant(identity(3)));
  const std::vector<double> mean{3, 0.5, 1.5};
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out.value()[i * 3 + c], mean[c], 1e-15);
}

TEST(Attention, MatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    const ad::Tensor x = random_tensor({3, 4}, rng);
    const ad::Tensor wq = random_tensor({4, 4}, rng), wk = random_tensor({4, 4}, rng), wv = random_tensor({4, 4}, rng);
    ad::Tape tape;
    ad::Var out = attention(tape.constant(x), tape.constant(wq), tape.constant(wk), tape.constant(wv));
    const auto expect = loop_attention(x, wq, wk, wv);
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(out.value()[i], expect[i], 1e-12);
  }
}

TEST(Attention, WeightsAreRowStochastic) {
  const ModelConfig cfg = small_config();
  ParamInit init(1);
  AttentionParams p = AttentionParams::init(cfg, init);
  std::mt19937_64 rng(2);
  for (ad::Tensor* w : {&p.spe.wq, &p.spe.wk, &p.spa.wq, &p.spa.wk}) {
    *w = random_tensor(w->shape, rng, -3, 3);
  }
  ad::Tape tape;
  const AttendedSequences s = exchange_and_attend(tape, p, random_tokens(tape, 2, 3, 4, 3));
  for (ad::Var w : {s.spectral_weights, s.spatial_weights}) {
    const std::size_t n = w.shape()[0];
    EXPECT_EQ(n, 7u);
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n; ++j) row += w.value()[i * n + j];
      EXPECT_NEAR(row, 1.0, 1e-10);
    }
  }
}

TEST(Attention, ClassTokensAreExchangedAndResidualAdded) {
  const ModelConfig cfg = small_config();
  ParamInit init(4);
  AttentionParams p = AttentionParams::init(cfg, init);
  ad::Tape tape;
  const TokenSequences tok = random_tokens(tape, 1, 2, 4, 5);
  const AttendedSequences s = exchange_and_attend(tape, p, tok);

  ad::Tensor x = ad::Tensor::zeros({3, 4});
  for (std::size_t c = 0; c < 4; ++c) x.data[c] = p.cls_spa.data[c];
  for (std::size_t i = 0; i < 8; ++i) x.data[4 + i] = tok.spectral.value()[i];
  const auto att = loop_attention(x, p.spe.wq, p.spe.wk, p.spe.wv);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(s.spectral.value()[i], att[i] + x.data[i], 1e-12);

  for (std::size_t c = 0; c < 4; ++c) x.data[c] = p.cls_spe.data[c];
  for (std::size_t i = 0; i < 8; ++i) x.data[4 + i] = tok.spatial.value()[i];
  const auto att2 = loop_attention(x, p.spa.wq, p.spa.wk, p.spa.wv);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(s.spatial.value()[i], att2[i] + x.data[i], 1e-12);
}

TEST(Attention, PermutationEquivariantOverTokens) {
  const ModelConfig cfg = small_config();
  ParamInit init(6);
  AttentionParams p = AttentionParams::init(cfg, init);
  ad::Tape tape;
  const TokenSequences tok = random_tokens(tape, 1, 4, 4, 7);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  auto permute = [&](ad::Var v) {
    ad::Tensor t = v.detach();
    ad::Tensor out = t;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t c = 0; c < 4; ++c) out.data[i * 4 + c] = t.data[perm[i] * 4 + c];
    return tape.constant(out);
  };
  TokenSequences shuffled = tok;
  shuffled.spectral = permute(tok.spectral);
  shuffled.spatial = permute(tok.spatial);
  const AttendedSequences a = exchange_and_attend(tape, p, tok);
  const AttendedSequences b = exchange_and_attend(tape, p, shuffled);
  for (auto [va, vb] : {std::pair{a.spectral, b.spectral}, std::pair{a.spatial, b.spatial}}) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(vb.value()[c], va.value()[c], 1e-13);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t c = 0; c < 4; ++c)
        EXPECT_NEAR(vb.value()[(i + 1) * 4 + c], va.value()[(perm[i] + 1) * 4 + c], 1e-13);
  }
}

TEST(Attention, WidthMismatchRejected) {
  ModelConfig cfg = small_config();
  cfg.spatial_dim = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  ParamInit init(8);
  AttentionParams p = AttentionParams::init(cfg, init);
  ad::Tape tape;
  EXPECT_THROW(exchange_and_attend(tape, p, random_tokens(tape, 1, 1, 4, 1)), ConfigError);
}

TEST(Restore, OutputShapeMatchesImage) {
  const ModelConfig cfg = small_config(4, 2);
  ParamInit init(9);
  AttentionParams p = AttentionParams::init(cfg, init);
  ad::Tape tape;
  const AttendedSequences s = exchange_and_attend(tape, p, random_tokens(tape, 3, 2, 4, 10));
  EXPECT_EQ(fuse_and_restore(tape, p, cfg, s, 5, 4).shape(), (ad::Shape{3, 5, 4}));
  EXPECT_EQ(fuse_and_restore(tape, p, cfg, s, 6, 3).shape(), (ad::Shape{3, 6, 3}));
  EXPECT_THROW(fuse_and_restore(tape, p, cfg, s, 7, 4), DimensionError);
  EXPECT_THROW(fuse_and_restore(tape, p, cfg, s, 4, 4), DimensionError);
}

TEST(Restore, SinglePatchBlockReplicatesProjection) {
  // Identity MLPs (leaky is identity on positive inputs), zero fuse bias:
  // every pixel of the block holds fuse_wᵀ[spe; spa] at its own offset.
  ModelConfig cfg = small_config(2, 2);
  cfg.fused_channels = 1;
  ParamInit init(11);
  AttentionParams p = AttentionParams::init(cfg, init);
  for (BranchParams* b : {&p.spe, &p.spa}) {
    b->mlp1_w = ad::Tensor({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
    b->mlp2_w = ad::Tensor({4, 2}, {1, 0, 0, 1, 0, 0, 0, 0});
  }
  ad::Tape tape;
  AttendedSequences s;
  s.grid_rows = s.grid_cols = 1;
  s.spectral = tape.constant(ad::Tensor({2, 2}, {9, 9, 0.5, 1.5}));
  s.spatial = tape.constant(ad::Tensor({2, 2}, {9, 9, 2.0, 0.25}));
  ad::Var map = scatter_tokens(tape, p, cfg, s, 2, 2);
  const std::vector<double> z{0.5, 1.5, 2.0, 0.25};
  for (std::size_t px = 0; px < 4; ++px) {
    double expect = 0.0;
    for (std::size_t k = 0; k < 4; ++k) expect += z[k] * p.fuse_w.data[k * 4 + px];
    EXPECT_NEAR(map.value()[px], expect, 1e-14);
  }
}

TEST(Restore, TokenPerturbationStaysInItsBlock) {
  const ModelConfig cfg = small_config(4, 2);
  ParamInit init(12);
  AttentionParams p = AttentionParams::init(cfg, init);
  ad::Tape tape;
  const std::size_t h = 4, w = 6, b = cfg.fused_channels;
  const AttendedSequences base = exchange_and_attend(tape, p, random_tokens(tape, 2, 3, 4, 13));
  const auto ref = scatter_tokens(tape, p, cfg, base, h, w).value();
  for (std::size_t j = 0; j < 6; ++j) {
    AttendedSequences pert = base;
    ad::Tensor spe = base.spectral.detach();
    for (std::size_t c = 0; c < 4; ++c) spe.data[(j + 1) * 4 + c] += 0.7;
    pert.spectral = tape.constant(spe);
    const auto out = scatter_tokens(tape, p, cfg, pert, h, w).value();
    bool changed = false;
    for (std::size_t ch = 0; ch < b; ++ch)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t q = 0; q < w; ++q) {
          const std::size_t i = (ch * h + r) * w + q;
          if (r / 2 * 3 + q / 2 == j) {
            changed |= out[i] != ref[i];
          } else {
            EXPECT_EQ(out[i], ref[i]);
          }
        }
    EXPECT_TRUE(changed) << j;
  }
}

TEST(TransformerGradient, AllParametersIncludingClassTokens) {
  const ModelConfig cfg = small_config(3, 2);
  ParamInit init(14);
  AttentionParams p = AttentionParams::init(cfg, init);
  std::mt19937_64 rng(15);
  p.visit([&](const std::string& name, ad::Tensor& t) {
    if (name.find("_b") != std::string::npos || name.find("cls") != std::string::npos) {
      t = random_tensor(t.shape, rng, -0.5, 0.5);
      t.requires_grad = true;
    }
  });
  auto loss = [&](ad::Tape& t) {
    const TokenSequences tok = random_tokens(t, 2, 2, 3, 16);
    const AttendedSequences s = exchange_and_attend(t, p, tok);
    return weighted_sum(t, fuse_and_restore(t, p, cfg, s, 3, 4), 17);
  };
  p.visit([&](const std::string& name, ad::Tensor& param) {
    EXPECT_LT(ad::finite_diff_check(loss, param, kStep), kTol) << name;
  });
}
