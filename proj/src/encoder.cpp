#include "tcagu/encoder.hpp"

#include "tcagu/errors.hpp"

namespace tcagu {

namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

}  // namespace

std::array<std::size_t, 3> compression_schedule(std::size_t bands, std::size_t channels) {
  return {ceil_div(bands, 2), ceil_div(bands, 4), channels};
}

FrontendParams FrontendParams::init(const ModelConfig& cfg, ParamInit& init) {
  const auto [c1, c2, c3] = compression_schedule(cfg.bands, cfg.channels);
  const std::size_t c = cfg.channels, m = cfg.patch_size;
  FrontendParams p;
  p.conv1_w = init.he_uniform({c1, cfg.bands, 1, 1}, cfg.bands);
  p.conv1_b = init.zeros({c1});
  p.conv2_w = init.he_uniform({c2, c1, 1, 1}, c1);
  p.conv2_b = init.zeros({c2});
  p.conv3_w = init.he_uniform({c3, c2, 1, 1}, c2);
  p.conv3_b = init.zeros({c3});
  p.spe_conv_w = init.he_uniform({c, c, 1, 1}, c);
  p.spe_conv_b = init.zeros({c});
  p.spe_fc_w = init.he_uniform({c, cfg.spectral_dim}, c);
  p.spe_fc_b = init.zeros({cfg.spectral_dim});
  p.spa_conv_w = init.he_uniform({c, c, 3, 3}, c * 9);
  p.spa_conv_b = init.zeros({c});
  p.spa_fc_w = init.he_uniform({c * m * m, cfg.spatial_dim}, c * m * m);
  p.spa_fc_b = init.zeros({cfg.spatial_dim});
  return p;
}

ad::Var compress(ad::Tape& tape, FrontendParams& params, const ModelConfig& cfg, ad::Var cube) {
  if (cube.shape().size() != 3 || cube.shape()[0] != cfg.bands) {
    throw DimensionError("compress: expected " + std::to_string(cfg.bands) + " bands, got " +
                         ad::shape_str(cube.shape()));
  }
  if (cfg.bands < 4) throw ConfigError("compress: need L >= 4");
  ad::Var x = ad::conv2d(cube, tape.param(params.conv1_w), tape.param(params.conv1_b), 0);
  x = ad::leaky_relu(x, cfg.leaky_slope);
  x = ad::conv2d(x, tape.param(params.conv2_w), tape.param(params.conv2_b), 0);
  x = ad::leaky_relu(x, cfg.leaky_slope);
  x = ad::conv2d(x, tape.param(params.conv3_w), tape.param(params.conv3_b), 0);
  return ad::leaky_relu(x, cfg.leaky_slope);
}

TokenSequences tokenize(ad::Tape& tape, FrontendParams& params, const ModelConfig& cfg, ad::Var features) {
  const auto& s = features.shape();
  if (s.size() != 3 || s[0] != cfg.channels) {
    throw DimensionError("tokenize: expected [" + std::to_string(cfg.channels) + "xHxW], got " +
                         ad::shape_str(s));
  }
  const std::size_t m = cfg.patch_size, h = s[1], w = s[2];
  if (m > h || m > w) {
    throw ConfigError("tokenize: patch size " + std::to_string(m) + " exceeds image " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  TokenSequences out;
  out.grid_rows = ceil_div(h, m);
  out.grid_cols = ceil_div(w, m);
  ad::Var padded = ad::pad2d(features, out.grid_rows * m, out.grid_cols * m);

  ad::Var spe = ad::conv2d(padded, tape.param(params.spe_conv_w), tape.param(params.spe_conv_b), 0);
  spe = ad::patch_mean(ad::leaky_relu(spe, cfg.leaky_slope), m);
  out.spectral = ad::linear(spe, tape.param(params.spe_fc_w), tape.param(params.spe_fc_b));

  ad::Var spa = ad::conv2d(padded, tape.param(params.spa_conv_w), tape.param(params.spa_conv_b), 1, m);
  spa = ad::patchify(ad::leaky_relu(spa, cfg.leaky_slope), m);
  out.spatial = ad::linear(spa, tape.param(params.spa_fc_w), tape.param(params.spa_fc_b));
  return out;
}

}  // namespace tcagu
