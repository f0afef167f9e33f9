#include "tcagu/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>

#include "tcagu/errors.hpp"
#include "tcagu/vca.hpp"

namespace tcagu {

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return NAN;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

const KeySummary* find_key(const std::vector<KeySummary>& s, const std::string& key) {
  for (const auto& k : s)
    if (k.key == key) return &k;
  return nullptr;
}

}  // namespace

std::size_t worker_threads_from_env() {
  const char* env = std::getenv("CAGU_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError(std::string("CAGU_THREADS must be a positive integer, got '") + env + "'");
  return static_cast<std::size_t>(v);
}

RunOutcome run_one(const RunSpec& run) {
  const HsiCube cube = generate_synthetic(run.scene);
  RunOutcome out;
  out.spec = run;
  TrainState state = start_training(run.train, cube);
  run_epochs(state, cube, run.train.epochs);
  ad::Tape tape;
  const ForwardResult fwd = forward(tape, state.params, state.config.model, cube_tensor(cube));
  out.metrics = evaluate(state.params.decoder.endmember_matrix(), abundance_matrix(fwd), *cube.gt_endmembers,
                         cube.abundance_matrix());
  out.final_loss = state.last_loss;
  out.loss_history = state.loss_history;
  out.graph_fingerprint = fwd.graph_fingerprint;
  state.params.visit([&](const std::string&, ad::Tensor& t) {
    out.final_parameters.insert(out.final_parameters.end(), t.data.begin(), t.data.end());
  });
  return out;
}

std::vector<RunOutcome> run_all(const std::vector<RunSpec>& runs, std::size_t threads) {
  std::vector<RunOutcome> results(runs.size());
  std::vector<std::exception_ptr> errors(runs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      try {
        results[i] = run_one(runs[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, runs.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

std::vector<RunSpec> snr_sweep_runs(const TrainConfig& base, const SynthSpec& scene, const std::vector<double>& snrs,
                                    std::size_t seeds) {
  if (snrs.size() < 2) throw ConfigError("SNR sweep needs at least two levels");
  if (seeds < 1) throw ConfigError("need at least one seed");
  std::vector<RunSpec> runs;
  for (double snr : snrs) {
    for (std::size_t s = 0; s < seeds; ++s) {
      RunSpec r{"snr", fmt(snr), scene, base};
      r.scene.snr_db = snr;
      r.scene.seed = s;
      r.train.seed = s;
      runs.push_back(r);
    }
  }
  return runs;
}

std::vector<RunSpec> beta_sweep_runs(const TrainConfig& base, const SynthSpec& scene, const std::vector<double>& betas,
                                     std::size_t seeds) {
  if (betas.empty()) throw ConfigError("beta sweep needs at least one beta");
  if (seeds < 1) throw ConfigError("need at least one seed");
  std::vector<RunSpec> runs;
  for (double beta : betas) {
    for (std::size_t s = 0; s < seeds; ++s) {
      RunSpec r{"beta", fmt(beta), scene, base};
      r.train.model.beta = beta;
      r.scene.seed = s;
      r.train.seed = s;
      runs.push_back(r);
    }
  }
  return runs;
}

std::vector<RunSpec> ablation_runs(const TrainConfig& base, const SynthSpec& scene, std::size_t seeds) {
  if (seeds < 1) throw ConfigError("need at least one seed");
  std::vector<RunSpec> runs;
  for (GraphMode mode : {GraphMode::none, GraphMode::static_grid, GraphMode::dynamic}) {
    for (std::size_t s = 0; s < seeds; ++s) {
      RunSpec r{"ablation", to_string(mode), scene, base};
      r.train.model.graph_mode = mode;
      r.scene.seed = s;
      r.train.seed = s;
      runs.push_back(r);
    }
  }
  return runs;
}

std::vector<KeySummary> summarize(const std::vector<RunOutcome>& outcomes) {
  std::vector<std::string> order;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_key;
  for (const auto& o : outcomes) {
    auto [it, fresh] = by_key.try_emplace(o.spec.key);
    if (fresh) order.push_back(o.spec.key);
    it->second.first.push_back(o.metrics.mean_sad);
    it->second.second.push_back(o.metrics.rmse);
  }
  std::vector<KeySummary> out;
  for (const auto& k : order) {
    const auto& [sad, rmse] = by_key.at(k);
    out.push_back({k, median(sad), median(rmse), sad.size()});
  }
  return out;
}

void write_sweep_csv(std::ostream& os, const std::vector<RunOutcome>& outcomes) {
  os << "sweep,key,seed,mean_sad,rmse,final_loss,graph\n";
  os << std::setprecision(10);
  const std::string sweep = outcomes.empty() ? "" : outcomes.front().spec.sweep;
  for (const auto& o : outcomes) {
    os << o.spec.sweep << ',' << o.spec.key << ',' << o.spec.train.seed << ',' << o.metrics.mean_sad << ','
       << o.metrics.rmse << ',' << o.final_loss << ',' << (o.graph_fingerprint.empty() ? "bypassed" : o.graph_fingerprint)
       << '\n';
  }
  for (const auto& s : summarize(outcomes)) {
    os << sweep << ',' << s.key << ",median," << s.median_sad << ',' << s.median_rmse << ",,\n";
  }
}

void write_sweep_metrics(std::ostream& os, const std::vector<RunOutcome>& outcomes) {
  write_metrics_header(os);
  for (const auto& o : outcomes) {
    write_metrics_rows(os, o.spec.sweep + "-" + o.spec.key, o.spec.train.seed, o.spec.scene.snr_db, o.metrics);
  }
}

bool snr_trend_holds(const std::vector<RunOutcome>& outcomes) {
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& o : outcomes) {
    lo = std::min(lo, o.spec.scene.snr_db);
    hi = std::max(hi, o.spec.scene.snr_db);
  }
  const auto s = summarize(outcomes);
  const KeySummary* a = find_key(s, fmt(hi));
  const KeySummary* b = find_key(s, fmt(lo));
  if (!a || !b) throw ContractError("SNR sweep outcomes lack their extreme levels");
  return a->median_sad <= b->median_sad;
}

bool ablation_order_holds(const std::vector<RunOutcome>& outcomes) {
  const auto s = summarize(outcomes);
  const KeySummary* none = find_key(s, "none");
  const KeySummary* grid = find_key(s, "static");
  const KeySummary* dyn = find_key(s, "dynamic");
  if (!none || !grid || !dyn) throw ContractError("ablation outcomes lack a case");
  return dyn->median_sad <= grid->median_sad && grid->median_sad <= none->median_sad;
}

bool best_beta_is_interior(const std::vector<RunOutcome>& outcomes) {
  const auto s = summarize(outcomes);
  if (s.empty()) throw ContractError("no beta sweep outcomes");
  auto value = [](const KeySummary& k) { return std::stod(k.key); };
  const auto best = std::min_element(s.begin(), s.end(), [](const auto& a, const auto& b) {
    return a.median_sad < b.median_sad;
  });
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& k : s) {
    lo = std::min(lo, value(k));
    hi = std::max(hi, value(k));
  }
  return value(*best) > lo && value(*best) < hi;
}

void write_pgm(const std::filesystem::path& path, const std::vector<double>& values, std::size_t height,
               std::size_t width) {
  if (values.size() != height * width) throw DimensionError("write_pgm: value count does not match image size");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << "P5\n" << width << ' ' << height << "\n255\n";
  for (double v : values) {
    const double c = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0);
    f.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  if (!f) throw IoError("failed writing " + path.string());
}

std::vector<double> read_pgm(const std::filesystem::path& path, std::size_t* height, std::size_t* width) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P5" || maxval != 255 || !f) throw FormatError("not an 8-bit binary PGM: " + path.string(), 0);
  f.get();
  std::vector<double> out(w * h);
  for (auto& v : out) {
    const int c = f.get();
    if (c == EOF) throw FormatError("PGM truncated: " + path.string(), static_cast<std::size_t>(f.tellg()));
    v = static_cast<double>(c) / 255.0;
  }
  if (height) *height = h;
  if (width) *width = w;
  return out;
}

ExportResult export_abundance_maps(const TrainState& state, const HsiCube& cube, const std::filesystem::path& out_dir,
                                   const std::string& dataset) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  TrainState copy = state;
  ad::Tape tape;
  const ForwardResult fwd = forward(tape, copy.params, copy.config.model, cube_tensor(cube));
  const Eigen::MatrixXd m = abundance_matrix(fwd);
  ExportResult out;
  for (Eigen::Index k = 0; k < m.rows(); ++k) {
    const auto path = out_dir / ("abundance_" + std::to_string(k) + ".pgm");
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(k, j);
    write_pgm(path, row, cube.height, cube.width);
    out.maps.push_back(path);
  }
  const auto csv = out_dir / "metrics.csv";
  std::ofstream f(csv, std::ios::trunc);
  if (!f) throw IoError("cannot write " + csv.string());
  write_metrics_header(f);
  if (cube.gt_endmembers && cube.gt_abundances) {
    out.metrics = evaluate(copy.params.decoder.endmember_matrix(), m, *cube.gt_endmembers, cube.abundance_matrix());
    write_metrics_rows(f, dataset, copy.config.seed, std::nullopt, *out.metrics);
  }
  return out;
}

ModelConfig gradcheck_config() {
  ModelConfig cfg;
  cfg.bands = 8;
  cfg.endmembers = 2;
  cfg.channels = 8;
  cfg.spectral_dim = 8;
  cfg.spatial_dim = 8;
  cfg.fused_channels = 8;
  cfg.patch_size = 2;
  cfg.k_steps = 2;
  cfg.graph_mode = GraphMode::dynamic;
  // wide enough that edge weights are O(1) on this scene
  cfg.sigma_f = 100.0;
  return cfg;
}

namespace {

constexpr double kKinkMargin = 1e-3;
constexpr double kAngleMargin = 1e-2;
constexpr int kMaxDraws = 1000;

// Distance of the evaluation point from the non-smooth spots of the loss:
// leaky_relu inputs near 0 and pixel angles near 0.
bool clear_of_kinks(const ad::Tape& tape, double slope) {
  for (std::size_t id = 0; id < tape.size(); ++id) {
    const std::string op = tape.op_of(id);
    if (op == "leaky_relu") {
      for (double y : tape.value_of(id)) {
        if ((y > 0.0 ? y : -y / slope) < kKinkMargin) return false;
      }
    } else if (op == "vector_angle") {
      for (double a : tape.value_of(id)) {
        if (a < kAngleMargin) return false;
      }
    }
  }
  return true;
}

}  // namespace

std::vector<GradGroup> gradcheck(const GradcheckOptions& options) {
  const ModelConfig cfg = gradcheck_config();
  SynthSpec scene;
  scene.height = 6;
  scene.width = 6;
  scene.bands = cfg.bands;
  scene.endmembers = cfg.endmembers;
  scene.snr_db = 30;
  scene.seed = options.seed;
  const HsiCube cube = generate_synthetic(scene);
  const ad::Tensor x = cube_tensor(cube);
  const Eigen::MatrixXd e0 = vca_extract(cube, cfg.endmembers, options.seed).endmembers;

  // Fresh init with random biases and mixing logits, redrawn until every
  // leaky unit and pixel angle sits clear of its kink.
  ModelParams params;
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> bias(-0.1, 0.1), logit(-0.5, 0.5);
  for (int draw = 0;; ++draw) {
    if (draw == kMaxDraws) throw NumericDomainError("gradcheck: no smooth evaluation point found");
    params = ModelParams::init(cfg, rng(), e0);
    params.visit([&](const std::string& name, ad::Tensor& t) {
      if (name.ends_with("_b")) {
        for (double& v : t.data) v = bias(rng);
      }
    });
    for (double& v : params.graph.mix_logits.data) v = logit(rng);
    ad::Tape tape;
    forward(tape, params, cfg, x);
    if (clear_of_kinks(tape, cfg.leaky_slope)) break;
  }
  params.visit([&](const std::string& name, ad::Tensor& t) {
    t.requires_grad = std::find(options.frozen.begin(), options.frozen.end(), name) == options.frozen.end();
  });

  auto loss = [&](ad::Tape& tape) { return forward(tape, params, cfg, x).loss.total; };
  std::vector<GradGroup> report;
  params.visit([&](const std::string& name, ad::Tensor& t) {
    if (!t.requires_grad) return;
    report.push_back({name, ad::finite_diff_check(loss, t, options.step), t.size()});
  });
  return report;
}

}  // namespace tcagu
