#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "tcagu/autodiff.hpp"

namespace tcagu {

/// Observed hyperspectral image, band-major (L×H×W, row-major), with optional
/// ground truth. Endmembers are L×P (one spectrum per column); abundances are
/// P×H×W.
struct HsiCube {
  std::size_t bands = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;
  std::optional<Eigen::MatrixXd> gt_endmembers;
  std::optional<std::vector<double>> gt_abundances;

  std::size_t pixels() const { return height * width; }
  /// P from whichever ground truth is present, else 0.
  std::size_t endmembers() const;
  /// L×N view of `data`; column j is pixel (j / W, j % W).
  Eigen::MatrixXd matrix() const;
  /// P×N matrix of the ground-truth abundances.
  Eigen::MatrixXd abundance_matrix() const;
  /// Throws DimensionError / SpecError if the invariants do not hold.
  void validate() const;
};

struct SynthSpec {
  std::size_t height = 30;
  std::size_t width = 30;
  std::size_t bands = 60;
  std::size_t endmembers = 3;
  double snr_db = 80.0;
  std::uint64_t seed = 0;
  double dirichlet_alpha = 1.0;
  bool purity_pixels = true;
};

/// Smooth Gaussian-bump endmembers, Dirichlet abundances smoothed by one 3×3
/// box pass and renormalised, optional one-hot pure pixels, i.i.d. Gaussian
/// noise at `snr_db`. Ground truth is stored noise-free.
HsiCube generate_synthetic(const SynthSpec& spec);

/// 10·log10(signal power / noise power) over every entry.
double empirical_snr_db(const std::vector<double>& clean, const std::vector<double>& noisy);

/// Little-endian container: "HSIC", u32 version=1, u32 flags (bit0 E, bit1 M),
/// u32 L, H, W, P, f32 data[L·H·W], optional f32 E (column-major L×P),
/// optional f32 M[P·H·W]. Values are stored as f32.
void write_container(const HsiCube& cube, const std::filesystem::path& path);
HsiCube read_container(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_container(const HsiCube& cube);
HsiCube decode_container(const std::vector<std::uint8_t>& bytes);

/// C×H×W -> C×N; the flat layout is unchanged, only the shape.
ad::Tensor unfold(const ad::Tensor& map);
/// C×N -> C×H×W.
ad::Tensor fold(const ad::Tensor& matrix, std::size_t height, std::size_t width);

}  // namespace tcagu
