#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>

#include "tcagu/autodiff.hpp"

namespace tcagu {

/// Which graph feeds the residual refinement: none (bypassed), a fixed grid
/// graph, or the content-adaptive graph rebuilt every forward pass.
enum class GraphMode { none, static_grid, dynamic };

std::string to_string(GraphMode mode);
GraphMode parse_graph_mode(const std::string& s);

/// Architecture hyperparameters shared by every stage of the network.
struct ModelConfig {
  std::size_t bands = 0;            // L
  std::size_t endmembers = 0;       // P
  std::size_t channels = 32;        // C, compressed spectral channels
  std::size_t spectral_dim = 64;    // D, spectral token width
  std::size_t spatial_dim = 64;     // S, spatial token width
  std::size_t fused_channels = 64;  // B
  std::size_t patch_size = 4;       // m
  std::size_t k_steps = 3;          // K
  std::size_t radius = 1;           // r
  double sigma_f = 1.0;
  double sigma_g = 0.0;             // <= 0 selects (2r)^2
  bool square_sigma_f = false;
  double beta = 0.3;
  GraphMode graph_mode = GraphMode::dynamic;
  double leaky_slope = 0.01;

  double effective_sigma_g() const {
    return sigma_g > 0.0 ? sigma_g : static_cast<double>(4 * radius * radius);
  }
  /// True when the refinement contributes nothing and the graph is skipped.
  bool graph_bypassed() const { return graph_mode == GraphMode::none || beta == 0.0; }
  /// Throws ConfigError on an invalid combination.
  void validate() const;
};

/// Seeded initializers for parameter tensors.
class ParamInit {
 public:
  explicit ParamInit(std::uint64_t seed) : rng_(seed) {}

  /// U(-sqrt(6/fan_in), sqrt(6/fan_in)).
  ad::Tensor he_uniform(ad::Shape shape, std::size_t fan_in);
  ad::Tensor normal(ad::Shape shape, double stddev);
  ad::Tensor zeros(ad::Shape shape);

 private:
  std::mt19937_64 rng_;
};

}  // namespace tcagu
