#pragma once

#include <array>

#include "tcagu/autodiff.hpp"
#include "tcagu/config.hpp"

namespace tcagu {

/// Spectral compression stack (three 1×1 convs, L → ⌈L/2⌉ → ⌈L/4⌉ → C) and the
/// two patch-token paths.
struct FrontendParams {
  ad::Tensor conv1_w, conv1_b;
  ad::Tensor conv2_w, conv2_b;
  ad::Tensor conv3_w, conv3_b;
  ad::Tensor spe_conv_w, spe_conv_b;  // 1×1, C → C
  ad::Tensor spe_fc_w, spe_fc_b;      // C → D
  ad::Tensor spa_conv_w, spa_conv_b;  // 3×3, C → C
  ad::Tensor spa_fc_w, spa_fc_b;      // C·m·m → S

  static FrontendParams init(const ModelConfig& cfg, ParamInit& init);

  template <class F>
  void visit(F&& f) {
    f("frontend.conv1_w", conv1_w);
    f("frontend.conv1_b", conv1_b);
    f("frontend.conv2_w", conv2_w);
    f("frontend.conv2_b", conv2_b);
    f("frontend.conv3_w", conv3_w);
    f("frontend.conv3_b", conv3_b);
    f("frontend.spe_conv_w", spe_conv_w);
    f("frontend.spe_conv_b", spe_conv_b);
    f("frontend.spe_fc_w", spe_fc_w);
    f("frontend.spe_fc_b", spe_fc_b);
    f("frontend.spa_conv_w", spa_conv_w);
    f("frontend.spa_conv_b", spa_conv_b);
    f("frontend.spa_fc_w", spa_fc_w);
    f("frontend.spa_fc_b", spa_fc_b);
  }
};

/// One spectral and one spatial token per m×m patch.
struct TokenSequences {
  ad::Var spectral;  // n×D
  ad::Var spatial;   // n×S
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;

  std::size_t count() const { return grid_rows * grid_cols; }
};

/// Channel schedule of the compression stack: {⌈L/2⌉, ⌈L/4⌉, C}.
std::array<std::size_t, 3> compression_schedule(std::size_t bands, std::size_t channels);

/// cube [L×H×W] -> I' [C×H×W].
ad::Var compress(ad::Tape& tape, FrontendParams& params, const ModelConfig& cfg, ad::Var cube);

/// I' [C×H×W] -> tokens. Edge patches are zero-padded to m×m.
TokenSequences tokenize(ad::Tape& tape, FrontendParams& params, const ModelConfig& cfg, ad::Var features);

}  // namespace tcagu
