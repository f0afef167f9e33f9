#pragma once

#include <array>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tcagu/autodiff.hpp"
#include "tcagu/config.hpp"

namespace tcagu {

/// Trunk of four 1×1 convs (B → B/2 → B/4 → P → P), 3×3 abundance conv and
/// the bias-free 1×1 endmember conv whose [L, P, 1, 1] kernel is E.
struct DecoderParams {
  ad::Tensor trunk1_w, trunk1_b;
  ad::Tensor trunk2_w, trunk2_b;
  ad::Tensor trunk3_w, trunk3_b;
  ad::Tensor trunk4_w, trunk4_b;
  ad::Tensor abun_w, abun_b;
  ad::Tensor endmembers;

  /// `initial_endmembers` is L×P, normally the VCA estimate.
  static DecoderParams init(const ModelConfig& cfg, ParamInit& init, const Eigen::MatrixXd& initial_endmembers);

  template <class F>
  void visit(F&& f) {
    f("decoder.trunk1_w", trunk1_w);
    f("decoder.trunk1_b", trunk1_b);
    f("decoder.trunk2_w", trunk2_w);
    f("decoder.trunk2_b", trunk2_b);
    f("decoder.trunk3_w", trunk3_w);
    f("decoder.trunk3_b", trunk3_b);
    f("decoder.trunk4_w", trunk4_w);
    f("decoder.trunk4_b", trunk4_b);
    f("decoder.abun_w", abun_w);
    f("decoder.abun_b", abun_b);
    f("decoder.endmembers", endmembers);
  }

  Eigen::MatrixXd endmember_matrix() const;
  void set_endmember_matrix(const Eigen::MatrixXd& e);
  /// Clamps every endmember entry to [0, inf).
  void clamp_endmembers();
};

/// Channel schedule of the trunk: {B/2, B/4, P, P}, each at least P.
std::array<std::size_t, 4> trunk_schedule(std::size_t fused, std::size_t endmembers);

struct Decoded {
  ad::Var abundances;      // P×H×W
  ad::Var reconstruction;  // L×H×W
};

/// X' [B×H×W] -> abundances and reconstruction.
Decoded decode(ad::Tape& tape, DecoderParams& params, const ModelConfig& cfg, ad::Var features);

/// Reconstruction with given abundances: Î = E·M per pixel.
ad::Var reconstruct(ad::Tape& tape, DecoderParams& params, ad::Var abundances);

struct LossTerms {
  ad::Var reconstruction;  // Σ‖Î_p − I_p‖² / N
  ad::Var angle;           // mean per-pixel spectral angle
  ad::Var total;
};

/// Both tensors L×H×W. Throws NumericDomainError on a zero-norm observed pixel.
LossTerms unmixing_loss(ad::Var observed, ad::Var reconstruction);

/// Spectral angle in radians; the norm product is floored at 1e-8.
double spectral_angle(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

struct UnmixResult {
  Eigen::MatrixXd endmembers;  // L×P, columns in ground-truth order
  Eigen::MatrixXd abundances;  // P×N, rows in ground-truth order
  std::vector<double> per_endmember_sad;
  std::vector<double> per_endmember_rmse;
  double mean_sad = 0.0;
  double rmse = 0.0;
  /// alignment[k] = estimated column matched to ground-truth endmember k.
  std::vector<std::size_t> alignment;
  bool greedy = false;
};

/// Permutation minimizing total SAD (exhaustive for P ≤ 8, greedy with a
/// warning on stderr beyond). Abundances are P×N.
UnmixResult evaluate(const Eigen::MatrixXd& est_endmembers, const Eigen::MatrixXd& est_abundances,
                     const Eigen::MatrixXd& gt_endmembers, const Eigen::MatrixXd& gt_abundances);

/// Header: dataset,seed,snr_db,endmember,sad,rmse,mean_sad.
void write_metrics_header(std::ostream& os);
/// One row per endmember plus a `mean` row.
void write_metrics_rows(std::ostream& os, const std::string& dataset, std::uint64_t seed,
                        std::optional<double> snr_db, const UnmixResult& result);

}  // namespace tcagu
