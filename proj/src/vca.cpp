#include "tcagu/vca.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "tcagu/errors.hpp"

namespace tcagu {

namespace {

// Leading `k` eigenvectors of a symmetric matrix, largest eigenvalue first.
// Each vector's largest-magnitude entry is made positive so the basis does
// not depend on solver sign conventions.
struct Subspace {
  Eigen::MatrixXd basis;
  Eigen::VectorXd values;  // all eigenvalues, descending
};

Subspace leading_eigvecs(const Eigen::MatrixXd& sym, Eigen::Index k) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw DegenerateSceneError("VCA: eigendecomposition failed");
  const Eigen::Index n = sym.rows();
  Subspace s;
  s.values = es.eigenvalues().reverse();
  s.basis.resize(n, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    Eigen::VectorXd v = es.eigenvectors().col(n - 1 - i);
    Eigen::Index at = 0;
    v.cwiseAbs().maxCoeff(&at);
    if (v(at) < 0) v = -v;
    s.basis.col(i) = v;
  }
  return s;
}

void require_rank(const Eigen::VectorXd& values, Eigen::Index needed) {
  const double top = values.size() ? values(0) : 0.0;
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < values.size(); ++i) rank += values(i) > 1e-12 * top && top > 0.0;
  if (rank < needed) {
    throw DegenerateSceneError("VCA: projected data has rank " + std::to_string(rank) + ", need " +
                               std::to_string(needed));
  }
}

}  // namespace

VcaResult vca_extract(const HsiCube& cube, std::size_t p, std::uint64_t seed) {
  cube.validate();
  return vca_extract(cube.matrix(), p, seed);
}

VcaResult vca_extract(const Eigen::MatrixXd& y_obs, std::size_t p_count, std::uint64_t seed) {
  const Eigen::Index l = y_obs.rows(), n = y_obs.cols();
  const auto p = static_cast<Eigen::Index>(p_count);
  if (p < 2) throw ConfigError("VCA needs P >= 2");
  if (n < p) throw DegenerateSceneError("VCA: fewer pixels than endmembers");
  if (l < p) throw DegenerateSceneError("VCA: fewer bands than endmembers");
  if (!y_obs.allFinite()) throw NumericDomainError("VCA: non-finite pixel values");

  const double inv_n = 1.0 / static_cast<double>(n);
  const Eigen::VectorXd mean = y_obs.rowwise().mean();
  const Eigen::MatrixXd centered = y_obs.colwise() - mean;
  const Subspace pca = leading_eigvecs(centered * centered.transpose() * inv_n, p);
  require_rank(pca.values, p - 1);
  const Eigen::MatrixXd x_p = pca.basis.transpose() * centered;

  // SNR estimate from the ratio of projected to total power.
  const double power_y = y_obs.squaredNorm() * inv_n;
  const double power_x = x_p.squaredNorm() * inv_n + mean.squaredNorm();
  double snr = std::numeric_limits<double>::infinity();
  const double noise = power_y - power_x;
  if (noise > 1e-12 * power_y) {
    const double signal = power_x - static_cast<double>(p) / static_cast<double>(l) * power_y;
    snr = signal > 0.0 ? 10.0 * std::log10(signal / noise) : -std::numeric_limits<double>::infinity();
  }
  const double snr_threshold = 15.0 + 10.0 * std::log10(static_cast<double>(p));

  VcaResult result;
  result.seed = seed;
  result.snr_estimate_db = snr;
  result.projective = snr >= snr_threshold;

  Eigen::MatrixXd y;  // p×N projected data on which the vertex search runs
  if (!result.projective) {
    const Eigen::MatrixXd x = x_p.topRows(p - 1);
    const double c = std::sqrt(x.colwise().squaredNorm().maxCoeff());
    y.resize(p, n);
    y.topRows(p - 1) = x;
    y.row(p - 1).setConstant(c);
  } else {
    const Subspace svd = leading_eigvecs(y_obs * y_obs.transpose() * inv_n, p);
    require_rank(svd.values, p);
    const Eigen::MatrixXd x = svd.basis.transpose() * y_obs;
    const Eigen::VectorXd u = x.rowwise().mean();
    const Eigen::RowVectorXd denom = u.transpose() * x;
    if ((denom.array().abs() < 1e-300).any()) {
      throw DegenerateSceneError("VCA: pixel orthogonal to the mean direction");
    }
    y = x.array().rowwise() / denom.array();
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p, p);
  a(p - 1, 0) = 1.0;
  result.pixel_indices.resize(p_count);
  for (Eigen::Index i = 0; i < p; ++i) {
    Eigen::VectorXd w(p);
    for (Eigen::Index k = 0; k < p; ++k) w(k) = unit(rng);
    const Eigen::MatrixXd pinv = a.completeOrthogonalDecomposition().pseudoInverse();
    Eigen::VectorXd f = w - a * (pinv * w);
    const double fn = f.norm();
    if (!(fn > 0.0)) throw DegenerateSceneError("VCA: search direction vanished");
    f /= fn;
    const Eigen::RowVectorXd v = f.transpose() * y;
    // Strict comparison keeps the lowest index on ties.
    Eigen::Index best = 0;
    double best_val = std::abs(v(0));
    for (Eigen::Index j = 1; j < n; ++j) {
      const double av = std::abs(v(j));
      if (av > best_val) {
        best_val = av;
        best = j;
      }
    }
    if (!(best_val > 1e-12)) throw DegenerateSceneError("VCA: no pixel extends the simplex");
    for (Eigen::Index k = 0; k < i; ++k) {
      if (result.pixel_indices[static_cast<std::size_t>(k)] == static_cast<std::size_t>(best)) {
        throw DegenerateSceneError("VCA: vertex selected twice");
      }
    }
    result.pixel_indices[static_cast<std::size_t>(i)] = static_cast<std::size_t>(best);
    a.col(i) = y.col(best);
  }

  result.endmembers.resize(l, p);
  for (Eigen::Index i = 0; i < p; ++i) {
    result.endmembers.col(i) = y_obs.col(static_cast<Eigen::Index>(result.pixel_indices[static_cast<std::size_t>(i)]));
  }
  return result;
}

}  // namespace tcagu
