#include "tcagu/transformer.hpp"

#include <cmath>

#include "tcagu/errors.hpp"

namespace tcagu {

namespace {

BranchParams init_branch(std::size_t d, ParamInit& init) {
  BranchParams b;
  b.wq = init.he_uniform({d, d}, d);
  b.wk = init.he_uniform({d, d}, d);
  b.wv = init.he_uniform({d, d}, d);
  b.mlp1_w = init.he_uniform({d, 2 * d}, d);
  b.mlp1_b = init.zeros({2 * d});
  b.mlp2_w = init.he_uniform({2 * d, d}, 2 * d);
  b.mlp2_b = init.zeros({d});
  return b;
}

ad::Var attend_branch(ad::Tape& tape, BranchParams& p, ad::Var cls, ad::Var tokens, ad::Var* weights) {
  ad::Var x = ad::concat_rows(cls, tokens);
  ad::Var a = attention(x, tape.param(p.wq), tape.param(p.wk), tape.param(p.wv), weights);
  return ad::add(a, x);
}

ad::Var mlp(ad::Tape& tape, BranchParams& p, ad::Var x, double slope) {
  ad::Var h = ad::leaky_relu(ad::linear(x, tape.param(p.mlp1_w), tape.param(p.mlp1_b)), slope);
  return ad::linear(h, tape.param(p.mlp2_w), tape.param(p.mlp2_b));
}

}  // namespace

AttentionParams AttentionParams::init(const ModelConfig& cfg, ParamInit& init) {
  const std::size_t d = cfg.spectral_dim, s = cfg.spatial_dim, m = cfg.patch_size, b = cfg.fused_channels;
  AttentionParams p;
  p.cls_spe = init.normal({1, d}, 0.02);
  p.cls_spa = init.normal({1, s}, 0.02);
  p.spe = init_branch(d, init);
  p.spa = init_branch(s, init);
  p.fuse_w = init.he_uniform({d + s, b * m * m}, d + s);
  p.fuse_b = init.zeros({b * m * m});
  p.smooth_w = init.he_uniform({b, b, 3, 3}, b * 9);
  p.smooth_b = init.zeros({b});
  return p;
}

ad::Var attention(ad::Var x, ad::Var wq, ad::Var wk, ad::Var wv, ad::Var* weights) {
  const double dk = static_cast<double>(wk.shape().at(1));
  ad::Var q = ad::matmul(x, wq);
  ad::Var k = ad::matmul(x, wk);
  ad::Var v = ad::matmul(x, wv);
  ad::Var logits = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(dk));
  ad::Var w = ad::softmax(logits, 1);
  if (weights) *weights = w;
  return ad::matmul(w, v);
}

AttendedSequences exchange_and_attend(ad::Tape& tape, AttentionParams& params, const TokenSequences& tokens) {
  if (params.cls_spe.shape[1] != params.cls_spa.shape[1]) {
    throw ConfigError("class-token exchange needs equal spectral and spatial token widths");
  }
  if (tokens.spectral.shape().at(1) != params.cls_spa.shape[1] ||
      tokens.spatial.shape().at(1) != params.cls_spe.shape[1]) {
    throw DimensionError("exchange_and_attend: token widths " + ad::shape_str(tokens.spectral.shape()) +
                         " / " + ad::shape_str(tokens.spatial.shape()) + " do not match class tokens");
  }
  AttendedSequences out;
  out.grid_rows = tokens.grid_rows;
  out.grid_cols = tokens.grid_cols;
  out.spectral = attend_branch(tape, params.spe, tape.param(params.cls_spa), tokens.spectral, &out.spectral_weights);
  out.spatial = attend_branch(tape, params.spa, tape.param(params.cls_spe), tokens.spatial, &out.spatial_weights);
  return out;
}

ad::Var scatter_tokens(ad::Tape& tape, AttentionParams& params, const ModelConfig& cfg,
                       const AttendedSequences& seq, std::size_t height, std::size_t width) {
  const std::size_t m = cfg.patch_size;
  const std::size_t n = seq.grid_rows * seq.grid_cols;
  if (seq.grid_rows != (height + m - 1) / m || seq.grid_cols != (width + m - 1) / m) {
    throw DimensionError("fuse_and_restore: " + std::to_string(height) + "x" + std::to_string(width) +
                         " image inconsistent with a " + std::to_string(seq.grid_rows) + "x" +
                         std::to_string(seq.grid_cols) + " patch grid");
  }
  if (seq.spectral.shape().at(0) != n + 1 || seq.spatial.shape().at(0) != n + 1) {
    throw DimensionError("fuse_and_restore: sequences must hold n+1 = " + std::to_string(n + 1) + " rows");
  }
  ad::Var spe = mlp(tape, params.spe, ad::slice_rows(seq.spectral, 1, n + 1), cfg.leaky_slope);
  ad::Var spa = mlp(tape, params.spa, ad::slice_rows(seq.spatial, 1, n + 1), cfg.leaky_slope);
  ad::Var fused = ad::linear(ad::concat_cols(spe, spa), tape.param(params.fuse_w), tape.param(params.fuse_b));
  ad::Var map = ad::unpatchify(fused, cfg.fused_channels, seq.grid_rows * m, seq.grid_cols * m, m);
  return ad::crop2d(map, height, width);
}

ad::Var fuse_and_restore(ad::Tape& tape, AttentionParams& params, const ModelConfig& cfg,
                         const AttendedSequences& seq, std::size_t height, std::size_t width) {
  ad::Var blocks = scatter_tokens(tape, params, cfg, seq, height, width);
  return ad::conv2d(blocks, tape.param(params.smooth_w), tape.param(params.smooth_b), 1);
}

}  // namespace tcagu
