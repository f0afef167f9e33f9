#pragma once

#include "tcagu/autodiff.hpp"
#include "tcagu/config.hpp"
#include "tcagu/encoder.hpp"

namespace tcagu {

/// Single-head self-attention block plus its two-layer MLP, for one branch.
struct BranchParams {
  ad::Tensor wq, wk, wv;        // d×d
  ad::Tensor mlp1_w, mlp1_b;    // d → 2d
  ad::Tensor mlp2_w, mlp2_b;    // 2d → d
};

struct AttentionParams {
  ad::Tensor cls_spe;  // 1×D, prepended to the spatial sequence
  ad::Tensor cls_spa;  // 1×S, prepended to the spectral sequence
  BranchParams spe, spa;
  ad::Tensor fuse_w, fuse_b;      // (D+S) → B·m·m
  ad::Tensor smooth_w, smooth_b;  // 3×3, B → B seam smoothing

  static AttentionParams init(const ModelConfig& cfg, ParamInit& init);

  template <class F>
  void visit(F&& f) {
    f("attention.cls_spe", cls_spe);
    f("attention.cls_spa", cls_spa);
    visit_branch("attention.spe.", spe, f);
    visit_branch("attention.spa.", spa, f);
    f("attention.fuse_w", fuse_w);
    f("attention.fuse_b", fuse_b);
    f("attention.smooth_w", smooth_w);
    f("attention.smooth_b", smooth_b);
  }

 private:
  template <class F>
  static void visit_branch(const std::string& prefix, BranchParams& b, F& f) {
    f(prefix + "wq", b.wq);
    f(prefix + "wk", b.wk);
    f(prefix + "wv", b.wv);
    f(prefix + "mlp1_w", b.mlp1_w);
    f(prefix + "mlp1_b", b.mlp1_b);
    f(prefix + "mlp2_w", b.mlp2_w);
    f(prefix + "mlp2_b", b.mlp2_b);
  }
};

/// Both attended sequences, class token still in row 0.
struct AttendedSequences {
  ad::Var spectral;          // (n+1)×D
  ad::Var spatial;           // (n+1)×S
  ad::Var spectral_weights;  // (n+1)×(n+1) attention matrix
  ad::Var spatial_weights;
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
};

/// softmax(QKᵀ/√d)·V with Q = xW_Q etc.; the attention matrix is written to
/// `weights` when non-null.
ad::Var attention(ad::Var x, ad::Var wq, ad::Var wk, ad::Var wv, ad::Var* weights = nullptr);

/// Prepends the opposite branch's class token to each sequence, applies
/// attention with a residual connection.
AttendedSequences exchange_and_attend(ad::Tape& tape, AttentionParams& params, const TokenSequences& tokens);

/// Drops class tokens, runs the branch MLPs, concatenates per token and
/// projects each token onto B values for every pixel of its patch.
/// Returns the scattered B×H×W map before seam smoothing.
ad::Var scatter_tokens(ad::Tape& tape, AttentionParams& params, const ModelConfig& cfg,
                       const AttendedSequences& seq, std::size_t height, std::size_t width);

/// scatter_tokens followed by the 3×3 seam-smoothing conv: I'' [B×H×W].
ad::Var fuse_and_restore(ad::Tape& tape, AttentionParams& params, const ModelConfig& cfg,
                         const AttendedSequences& seq, std::size_t height, std::size_t width);

}  // namespace tcagu
