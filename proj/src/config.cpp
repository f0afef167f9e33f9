#include "tcagu/config.hpp"

#include <cmath>

#include "tcagu/errors.hpp"

namespace tcagu {

std::string to_string(GraphMode mode) {
  switch (mode) {
    case GraphMode::none: return "none";
    case GraphMode::static_grid: return "static";
    case GraphMode::dynamic: return "dynamic";
  }
  return "unknown";
}

GraphMode parse_graph_mode(const std::string& s) {
  if (s == "none") return GraphMode::none;
  if (s == "static") return GraphMode::static_grid;
  if (s == "dynamic") return GraphMode::dynamic;
  throw ConfigError("unknown graph mode '" + s + "' (expected none|static|dynamic)");
}

void ModelConfig::validate() const {
  if (bands < 4) throw ConfigError("spectral compression needs L >= 4");
  if (endmembers < 2) throw ConfigError("need at least two endmembers");
  if (channels == 0 || fused_channels == 0 || spectral_dim == 0 || spatial_dim == 0) {
    throw ConfigError("channel and token widths must be positive");
  }
  if (spectral_dim != spatial_dim) {
    throw ConfigError("class-token exchange needs D == S (got D=" + std::to_string(spectral_dim) +
                      ", S=" + std::to_string(spatial_dim) + ")");
  }
  if (patch_size == 0) throw ConfigError("patch size must be positive");
  if (k_steps < 1) throw ConfigError("graph propagation needs K >= 1");
  if (radius < 1) throw ConfigError("graph window radius must be >= 1");
  if (!(sigma_f > 0.0)) throw ConfigError("sigma_f must be positive");
  if (sigma_g < 0.0) throw ConfigError("sigma_g must be positive (or 0 for the default)");
  if (!std::isfinite(beta) || beta < 0.0) throw ConfigError("beta must be finite and >= 0");
}

ad::Tensor ParamInit::he_uniform(ad::Shape shape, std::size_t fan_in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  ad::Tensor t = ad::Tensor::zeros(std::move(shape), true);
  for (double& v : t.data) v = u(rng_);
  return t;
}

ad::Tensor ParamInit::normal(ad::Shape shape, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  ad::Tensor t = ad::Tensor::zeros(std::move(shape), true);
  for (double& v : t.data) v = n(rng_);
  return t;
}

ad::Tensor ParamInit::zeros(ad::Shape shape) { return ad::Tensor::zeros(std::move(shape), true); }

}  // namespace tcagu
