#include "tcagu/graph.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

#include "tcagu/errors.hpp"

namespace tcagu {

namespace {

void check_sigma(double sigma_f, double sigma_g, std::size_t radius) {
  if (!(sigma_f > 0.0) || !(sigma_g > 0.0)) throw ConfigError("graph kernel scales must be positive");
  if (radius < 1) throw ConfigError("graph window radius must be >= 1");
}

ad::Var self_loops(ad::Tape& tape, const ad::SparsePattern& p) {
  ad::Tensor t = ad::Tensor::zeros({p.nnz()});
  for (std::size_t k = 0; k < p.nnz(); ++k) t.data[k] = p.row[k] == p.col[k] ? 1.0 : 0.0;
  return tape.constant(std::move(t));
}

}  // namespace

GraphMixParams GraphMixParams::init(const ModelConfig& cfg) {
  GraphMixParams p;
  const std::size_t b = cfg.fused_channels;
  p.proj = ad::Tensor::zeros({b, b}, true);
  for (std::size_t i = 0; i < b; ++i) p.proj.data[i * b + i] = 1.0;
  p.mix_logits = ad::Tensor::zeros({cfg.k_steps}, true);
  return p;
}

std::shared_ptr<const ad::SparsePattern> window_pattern(std::size_t height, std::size_t width, std::size_t radius) {
  auto p = std::make_shared<ad::SparsePattern>();
  p->n = height * width;
  p->row_ptr.reserve(p->n + 1);
  p->row_ptr.push_back(0);
  const auto r = static_cast<std::ptrdiff_t>(radius);
  const auto h = static_cast<std::ptrdiff_t>(height), w = static_cast<std::ptrdiff_t>(width);
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
          const std::ptrdiff_t yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          p->row.push_back(static_cast<std::size_t>(y * w + x));
          p->col.push_back(static_cast<std::size_t>(yy * w + xx));
        }
      }
      p->row_ptr.push_back(p->col.size());
    }
  }
  return p;
}

ContentGraph build_graph(ad::Var features, std::size_t height, std::size_t width, std::size_t radius,
                         double sigma_f, double sigma_g, bool square_sigma_f) {
  check_sigma(sigma_f, sigma_g, radius);
  if (features.shape().size() != 2 || features.shape()[1] != height * width) {
    throw DimensionError("build_graph: features " + ad::shape_str(features.shape()) + " for a " +
                         std::to_string(height) + "x" + std::to_string(width) + " image");
  }
  ad::Tape& tape = *features.tape;
  ContentGraph g;
  g.kind = GraphKind::content;
  g.height = height;
  g.width = width;
  g.radius = radius;
  g.pattern = window_pattern(height, width, radius);
  const ad::SparsePattern& p = *g.pattern;

  ad::Tensor spatial = ad::Tensor::zeros({p.nnz()});
  for (std::size_t k = 0; k < p.nnz(); ++k) {
    if (p.row[k] == p.col[k]) continue;
    const double dy = static_cast<double>(p.row[k] / width) - static_cast<double>(p.col[k] / width);
    const double dx = static_cast<double>(p.row[k] % width) - static_cast<double>(p.col[k] % width);
    spatial.data[k] = std::exp(-(dy * dy + dx * dx) / (sigma_g * sigma_g));
  }
  const double denom = square_sigma_f ? sigma_f * sigma_f : sigma_f;
  ad::Var feat = ad::exp(ad::scale(ad::edge_sqdist(features, g.pattern), -1.0 / denom));
  g.weights = ad::mul(feat, tape.constant(std::move(spatial)));
  g.normalized = ad::sym_normalize(ad::add(g.weights, self_loops(tape, p)), g.pattern);
  return g;
}

ContentGraph build_graph(ad::Var features, std::size_t height, std::size_t width, const ModelConfig& cfg) {
  return build_graph(features, height, width, cfg.radius, cfg.sigma_f, cfg.effective_sigma_g(), cfg.square_sigma_f);
}

ContentGraph build_static_grid_graph(ad::Tape& tape, std::size_t height, std::size_t width, std::size_t radius) {
  if (radius < 1) throw ConfigError("graph window radius must be >= 1");
  ContentGraph g;
  g.kind = GraphKind::static_grid;
  g.height = height;
  g.width = width;
  g.radius = radius;
  g.pattern = window_pattern(height, width, radius);
  const ad::SparsePattern& p = *g.pattern;
  ad::Tensor w = ad::Tensor::filled({p.nnz()}, 1.0);
  for (std::size_t k = 0; k < p.nnz(); ++k) {
    if (p.row[k] == p.col[k]) w.data[k] = 0.0;
  }
  g.weights = tape.constant(std::move(w));
  g.normalized = ad::sym_normalize(ad::add(g.weights, self_loops(tape, p)), g.pattern);
  return g;
}

ad::Var mixing_weights(ad::Tape& tape, GraphMixParams& params) {
  return ad::softmax(tape.param(params.mix_logits), 0);
}

std::vector<ad::Var> propagation_terms(ad::Tape& tape, const ContentGraph& graph, GraphMixParams& params,
                                       ad::Var x, std::size_t k_steps) {
  if (k_steps < 1) throw ConfigError("graph propagation needs K >= 1");
  std::vector<ad::Var> terms;
  ad::Var z = ad::matmul(tape.param(params.proj), x);
  for (std::size_t t = 0; t < k_steps; ++t) {
    z = ad::spmm(z, graph.pattern, graph.normalized);
    terms.push_back(z);
  }
  return terms;
}

ad::Var propagate(ad::Tape& tape, const ContentGraph& graph, GraphMixParams& params, ad::Var x, double beta) {
  const std::size_t k = params.mix_logits.size();
  const std::vector<ad::Var> terms = propagation_terms(tape, graph, params, x, k);
  ad::Var alpha = mixing_weights(tape, params);
  ad::Var y = ad::mul_scalar(terms[0], ad::element(alpha, 0));
  for (std::size_t t = 1; t < k; ++t) y = ad::add(y, ad::mul_scalar(terms[t], ad::element(alpha, t)));
  return ad::add(x, ad::scale(y, beta));
}

Eigen::MatrixXd dense_adjacency(const ContentGraph& graph) {
  const ad::SparsePattern& p = *graph.pattern;
  const auto n = static_cast<Eigen::Index>(p.n);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  const auto& v = graph.normalized.value();
  for (std::size_t k = 0; k < p.nnz(); ++k) {
    a(static_cast<Eigen::Index>(p.row[k]), static_cast<Eigen::Index>(p.col[k])) = v[k];
  }
  return a;
}

double largest_eigenvalue(const ContentGraph& graph, int iterations) {
  const ad::SparsePattern& p = *graph.pattern;
  const auto& v = graph.normalized.value();
  std::vector<double> x(p.n, 1.0 / std::sqrt(static_cast<double>(p.n))), y(p.n);
  for (std::size_t i = 0; i < p.n; ++i) x[i] *= 1.0 + 1e-3 * static_cast<double>(i % 7);
  double lambda = 0.0;
  for (int it = 0; it < iterations; ++it) {
    std::fill(y.begin(), y.end(), 0.0);
    for (std::size_t k = 0; k < p.nnz(); ++k) y[p.row[k]] += v[k] * x[p.col[k]];
    double dot = 0.0, norm = 0.0, xx = 0.0;
    for (std::size_t i = 0; i < p.n; ++i) {
      dot += x[i] * y[i];
      xx += x[i] * x[i];
      norm += y[i] * y[i];
    }
    lambda = dot / xx;
    norm = std::sqrt(norm);
    if (!(norm > 0.0)) return 0.0;
    for (std::size_t i = 0; i < p.n; ++i) x[i] = y[i] / norm;
  }
  return lambda;
}

std::string fingerprint(const ContentGraph& graph) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* data, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  const auto kind = static_cast<int>(graph.kind);
  mix(&kind, sizeof kind);
  const auto& v = graph.normalized.value();
  mix(v.data(), v.size() * sizeof(double));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(graph.kind == GraphKind::content ? "content:" : "static:") + buf;
}

}  // namespace tcagu
