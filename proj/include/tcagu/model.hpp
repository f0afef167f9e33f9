#pragma once

#include <optional>
#include <string>

#include "tcagu/decoder.hpp"
#include "tcagu/encoder.hpp"
#include "tcagu/graph.hpp"
#include "tcagu/transformer.hpp"

namespace tcagu {

struct ModelParams {
  FrontendParams frontend;
  AttentionParams attention;
  GraphMixParams graph;
  DecoderParams decoder;

  /// Random init from `seed`; the endmember kernel is set to `initial_endmembers` (L×P).
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed, const Eigen::MatrixXd& initial_endmembers);

  /// Visits every parameter tensor in a fixed order.
  template <class F>
  void visit(F&& f) {
    frontend.visit(f);
    attention.visit(f);
    graph.visit(f);
    decoder.visit(f);
  }
};

struct ForwardResult {
  ad::Var abundances;      // P×H×W
  ad::Var reconstruction;  // L×H×W
  ad::Var fused;           // I'' [B×H×W]
  ad::Var refined;         // X' [B×H×W]
  LossTerms loss;
  /// Empty when the graph stage is bypassed.
  std::string graph_fingerprint;
};

/// Full pass over cube [L×H×W]. The graph stage is skipped when
/// cfg.graph_bypassed(), so X' = X exactly.
ForwardResult forward(ad::Tape& tape, ModelParams& params, const ModelConfig& cfg, const ad::Tensor& cube);

}  // namespace tcagu
