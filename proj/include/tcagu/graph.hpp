#pragma once

#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tcagu/autodiff.hpp"
#include "tcagu/config.hpp"

namespace tcagu {

enum class GraphKind { content, static_grid };

/// Window graph over an H×W pixel grid with its normalized adjacency Â.
/// Stored entries cover every in-window pair including the self entry, in
/// row-major i, then window order j.
struct ContentGraph {
  GraphKind kind = GraphKind::content;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t radius = 1;
  std::shared_ptr<const ad::SparsePattern> pattern;
  ad::Var weights;     // D_ij on the pattern, 0 on the diagonal
  ad::Var normalized;  // Â on the pattern

  std::size_t nodes() const { return pattern->n; }
};

/// Projection (graph_proj, B×B) and mixing logits (K) of the refinement.
struct GraphMixParams {
  ad::Tensor proj;
  ad::Tensor mix_logits;

  /// Identity projection, zero logits.
  static GraphMixParams init(const ModelConfig& cfg);

  template <class F>
  void visit(F&& f) {
    f("graph.proj", proj);
    f("graph.mix_logits", mix_logits);
  }
};

/// CSR pattern of the (2r+1)² window, clipped at the image border.
std::shared_ptr<const ad::SparsePattern> window_pattern(std::size_t height, std::size_t width, std::size_t radius);

/// features f [B×N] of an H×W image. Positions are integer (row, col).
/// D_ij = exp(-‖f_i-f_j‖²/σ_f)·exp(-‖g_i-g_j‖²/σ_g²), with σ_f² instead when
/// `square_sigma_f` is set.
ContentGraph build_graph(ad::Var features, std::size_t height, std::size_t width, std::size_t radius,
                         double sigma_f, double sigma_g, bool square_sigma_f = false);
ContentGraph build_graph(ad::Var features, std::size_t height, std::size_t width, const ModelConfig& cfg);

/// All in-window weights fixed to 1.
ContentGraph build_static_grid_graph(ad::Tape& tape, std::size_t height, std::size_t width, std::size_t radius);

/// α = softmax(mix_logits).
ad::Var mixing_weights(ad::Tape& tape, GraphMixParams& params);

/// Z¹..Z^K with Z⁰ = proj·X and Zᵗ = Zᵗ⁻¹Â.
std::vector<ad::Var> propagation_terms(ad::Tape& tape, const ContentGraph& graph, GraphMixParams& params,
                                       ad::Var x, std::size_t k_steps);

/// X' = X + β·Σ αₜZᵗ.
ad::Var propagate(ad::Tape& tape, const ContentGraph& graph, GraphMixParams& params, ad::Var x, double beta);

/// Dense N×N copy of Â.
Eigen::MatrixXd dense_adjacency(const ContentGraph& graph);
/// Largest eigenvalue of Â by power iteration.
double largest_eigenvalue(const ContentGraph& graph, int iterations = 500);
/// "content:<hex>" / "static:<hex>", hashing the kind and the bits of Â.
std::string fingerprint(const ContentGraph& graph);

}  // namespace tcagu
