#include "tcagu/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "tcagu/errors.hpp"

namespace tcagu {

std::array<std::size_t, 4> trunk_schedule(std::size_t fused, std::size_t endmembers) {
  return {std::max((fused + 1) / 2, endmembers), std::max((fused + 3) / 4, endmembers), endmembers, endmembers};
}

DecoderParams DecoderParams::init(const ModelConfig& cfg, ParamInit& init, const Eigen::MatrixXd& initial) {
  const std::size_t p = cfg.endmembers, b = cfg.fused_channels;
  if (static_cast<std::size_t>(initial.rows()) != cfg.bands || static_cast<std::size_t>(initial.cols()) != p) {
    throw DimensionError("decoder init: endmember matrix is " + std::to_string(initial.rows()) + "x" +
                         std::to_string(initial.cols()) + ", expected " + std::to_string(cfg.bands) + "x" +
                         std::to_string(p));
  }
  const auto [c1, c2, c3, c4] = trunk_schedule(b, p);
  DecoderParams d;
  d.trunk1_w = init.he_uniform({c1, b, 1, 1}, b);
  d.trunk1_b = init.zeros({c1});
  d.trunk2_w = init.he_uniform({c2, c1, 1, 1}, c1);
  d.trunk2_b = init.zeros({c2});
  d.trunk3_w = init.he_uniform({c3, c2, 1, 1}, c2);
  d.trunk3_b = init.zeros({c3});
  d.trunk4_w = init.he_uniform({c4, c3, 1, 1}, c3);
  d.trunk4_b = init.zeros({c4});
  d.abun_w = init.he_uniform({p, c4, 3, 3}, c4 * 9);
  d.abun_b = init.zeros({p});
  d.endmembers = init.zeros({cfg.bands, p, 1, 1});
  d.set_endmember_matrix(initial);
  return d;
}

Eigen::MatrixXd DecoderParams::endmember_matrix() const {
  const auto l = static_cast<Eigen::Index>(endmembers.shape[0]), p = static_cast<Eigen::Index>(endmembers.shape[1]);
  Eigen::MatrixXd e(l, p);
  for (Eigen::Index i = 0; i < l; ++i)
    for (Eigen::Index k = 0; k < p; ++k) e(i, k) = endmembers.data[static_cast<std::size_t>(i * p + k)];
  return e;
}

void DecoderParams::set_endmember_matrix(const Eigen::MatrixXd& e) {
  const auto l = e.rows(), p = e.cols();
  endmembers.shape = {static_cast<std::size_t>(l), static_cast<std::size_t>(p), 1, 1};
  endmembers.data.resize(static_cast<std::size_t>(l * p));
  for (Eigen::Index i = 0; i < l; ++i)
    for (Eigen::Index k = 0; k < p; ++k) endmembers.data[static_cast<std::size_t>(i * p + k)] = e(i, k);
}

void DecoderParams::clamp_endmembers() {
  for (double& v : endmembers.data) v = std::max(v, 0.0);
}

ad::Var reconstruct(ad::Tape& tape, DecoderParams& params, ad::Var abundances) {
  return ad::conv2d(abundances, tape.param(params.endmembers), std::nullopt, 0);
}

Decoded decode(ad::Tape& tape, DecoderParams& params, const ModelConfig& cfg, ad::Var features) {
  if (features.shape().size() != 3 || features.shape()[0] != cfg.fused_channels) {
    throw DimensionError("decode: expected [" + std::to_string(cfg.fused_channels) + "xHxW], got " +
                         ad::shape_str(features.shape()));
  }
  const double slope = cfg.leaky_slope;
  ad::Var x = ad::leaky_relu(ad::conv2d(features, tape.param(params.trunk1_w), tape.param(params.trunk1_b), 0), slope);
  x = ad::leaky_relu(ad::conv2d(x, tape.param(params.trunk2_w), tape.param(params.trunk2_b), 0), slope);
  x = ad::leaky_relu(ad::conv2d(x, tape.param(params.trunk3_w), tape.param(params.trunk3_b), 0), slope);
  x = ad::leaky_relu(ad::conv2d(x, tape.param(params.trunk4_w), tape.param(params.trunk4_b), 0), slope);
  x = ad::conv2d(x, tape.param(params.abun_w), tape.param(params.abun_b), 1);
  Decoded out;
  out.abundances = ad::softmax(x, 0);
  out.reconstruction = reconstruct(tape, params, out.abundances);
  return out;
}

LossTerms unmixing_loss(ad::Var observed, ad::Var reconstruction) {
  const ad::Shape& s = observed.shape();
  if (s != reconstruction.shape()) {
    throw DimensionError("loss: observed " + ad::shape_str(s) + " vs reconstruction " +
                         ad::shape_str(reconstruction.shape()));
  }
  if (s.size() != 3) throw DimensionError("loss: expected [LxHxW], got " + ad::shape_str(s));
  const std::size_t l = s[0], n = s[1] * s[2];
  const auto& iv = observed.value();
  for (std::size_t j = 0; j < n; ++j) {
    double norm = 0.0;
    for (std::size_t b = 0; b < l; ++b) norm += iv[b * n + j] * iv[b * n + j];
    if (!(norm > 0.0)) {
      throw NumericDomainError("loss: observed pixel " + std::to_string(j) + " has a zero spectrum");
    }
  }
  ad::Var obs = ad::reshape(observed, {l, n});
  ad::Var rec = ad::reshape(reconstruction, {l, n});
  LossTerms t;
  t.reconstruction = ad::scale(ad::sum(ad::square(ad::sub(rec, obs))), 1.0 / static_cast<double>(n));
  t.angle = ad::mean(ad::vector_angle(obs, rec, 0));
  t.total = ad::add(t.reconstruction, t.angle);
  return t;
}

double spectral_angle(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return std::acos(std::clamp(a.dot(b) / std::max(a.norm() * b.norm(), 1e-8), -1.0, 1.0));
}

UnmixResult evaluate(const Eigen::MatrixXd& est_e, const Eigen::MatrixXd& est_m, const Eigen::MatrixXd& gt_e,
                     const Eigen::MatrixXd& gt_m) {
  const Eigen::Index p = gt_e.cols();
  if (est_e.rows() != gt_e.rows() || est_e.cols() != p || est_m.rows() != p || gt_m.rows() != p ||
      est_m.cols() != gt_m.cols()) {
    throw DimensionError("evaluate: estimate (" + std::to_string(est_e.rows()) + "x" + std::to_string(est_e.cols()) +
                         ", " + std::to_string(est_m.rows()) + "x" + std::to_string(est_m.cols()) +
                         ") does not match ground truth (" + std::to_string(gt_e.rows()) + "x" +
                         std::to_string(p) + ", " + std::to_string(gt_m.rows()) + "x" + std::to_string(gt_m.cols()) +
                         ")");
  }
  Eigen::MatrixXd cost(p, p);  // cost(k, e): gt k vs estimate e
  for (Eigen::Index k = 0; k < p; ++k)
    for (Eigen::Index e = 0; e < p; ++e) cost(k, e) = spectral_angle(est_e.col(e), gt_e.col(k));

  UnmixResult r;
  r.alignment.resize(static_cast<std::size_t>(p));
  if (p <= 8) {
    std::vector<std::size_t> perm(static_cast<std::size_t>(p));
    std::iota(perm.begin(), perm.end(), 0);
    double best = INFINITY;
    do {
      double total = 0.0;
      for (Eigen::Index k = 0; k < p; ++k) total += cost(k, static_cast<Eigen::Index>(perm[static_cast<std::size_t>(k)]));
      if (total < best) {
        best = total;
        r.alignment = perm;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
  } else {
    r.greedy = true;
    std::cerr << "warning: P = " << p << " > 8, endmember alignment uses greedy matching\n";
    std::vector<bool> used_gt(static_cast<std::size_t>(p)), used_est(static_cast<std::size_t>(p));
    for (Eigen::Index step = 0; step < p; ++step) {
      double best = INFINITY;
      Eigen::Index bk = 0, be = 0;
      for (Eigen::Index k = 0; k < p; ++k)
        for (Eigen::Index e = 0; e < p; ++e)
          if (!used_gt[static_cast<std::size_t>(k)] && !used_est[static_cast<std::size_t>(e)] && cost(k, e) < best) {
            best = cost(k, e);
            bk = k;
            be = e;
          }
      used_gt[static_cast<std::size_t>(bk)] = used_est[static_cast<std::size_t>(be)] = true;
      r.alignment[static_cast<std::size_t>(bk)] = static_cast<std::size_t>(be);
    }
  }

  const auto n = static_cast<double>(gt_m.cols());
  r.endmembers.resize(est_e.rows(), p);
  r.abundances.resize(p, gt_m.cols());
  double sq_total = 0.0;
  for (Eigen::Index k = 0; k < p; ++k) {
    const auto e = static_cast<Eigen::Index>(r.alignment[static_cast<std::size_t>(k)]);
    r.endmembers.col(k) = est_e.col(e);
    r.abundances.row(k) = est_m.row(e);
    r.per_endmember_sad.push_back(cost(k, e));
    const double sq = (est_m.row(e) - gt_m.row(k)).squaredNorm();
    r.per_endmember_rmse.push_back(std::sqrt(sq / n));
    sq_total += sq;
  }
  r.mean_sad = std::accumulate(r.per_endmember_sad.begin(), r.per_endmember_sad.end(), 0.0) / static_cast<double>(p);
  r.rmse = std::sqrt(sq_total / (n * static_cast<double>(p)));
  return r;
}

void write_metrics_header(std::ostream& os) { os << "dataset,seed,snr_db,endmember,sad,rmse,mean_sad\n"; }

void write_metrics_rows(std::ostream& os, const std::string& dataset, std::uint64_t seed,
                        std::optional<double> snr_db, const UnmixResult& r) {
  std::ostringstream snr;
  if (snr_db) snr << *snr_db;
  auto row = [&](const std::string& name, double sad, double rmse) {
    os << dataset << ',' << seed << ',' << snr.str() << ',' << name << ',' << std::setprecision(10) << sad << ','
       << rmse << ',' << r.mean_sad << '\n';
  };
  for (std::size_t k = 0; k < r.per_endmember_sad.size(); ++k) {
    row(std::to_string(k), r.per_endmember_sad[k], r.per_endmember_rmse[k]);
  }
  row("mean", r.mean_sad, r.rmse);
}

}  // namespace tcagu
