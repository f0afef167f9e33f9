#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "tcagu/hsi.hpp"

namespace tcagu {

struct VcaResult {
  Eigen::MatrixXd endmembers;              // L×P, columns copied from observed pixels
  std::vector<std::size_t> pixel_indices;  // P distinct pixel indices
  std::uint64_t seed = 0;
  double snr_estimate_db = 0.0;
  bool projective = false;                 // high-SNR (projective) branch taken
};

/// Vertex Component Analysis (Nascimento & Bioucas-Dias). Picks P observed
/// pixels at the vertices of the data simplex. Throws DegenerateSceneError if
/// the data does not span P-1 dimensions.
VcaResult vca_extract(const HsiCube& cube, std::size_t p, std::uint64_t seed);

/// Same, on an L×N matrix of pixel spectra.
VcaResult vca_extract(const Eigen::MatrixXd& pixels, std::size_t p, std::uint64_t seed);

}  // namespace tcagu
