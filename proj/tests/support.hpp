#pragma once

#include <random>

#include "tcagu/autodiff.hpp"

namespace tcagu::testing_support {

inline ad::Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  ad::Tensor t = ad::Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = u(rng);
  return t;
}

// Contracts y against a fixed random weight so every output coordinate matters.
inline ad::Var weighted_sum(ad::Tape& tape, ad::Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(y, tape.constant(random_tensor(y.shape(), rng))));
}

inline std::size_t draw(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

constexpr double kTol = 1e-4;
constexpr double kStep = 1e-5;

}  // namespace tcagu::testing_support
