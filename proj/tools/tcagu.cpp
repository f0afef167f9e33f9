#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tcagu/errors.hpp"
#include "tcagu/experiments.hpp"
#include "tcagu/hsi.hpp"
#include "tcagu/train.hpp"

using namespace tcagu;

namespace {

struct SceneFlags {
  std::size_t height = 30, width = 30, bands = 60, endmembers = 3;
  double snr = 80.0;
  double alpha = 1.0;
  bool no_pure = false;

  void add(CLI::App* app, bool with_snr) {
    app->add_option("--height", height, "Image height")->check(CLI::PositiveNumber);
    app->add_option("--width", width, "Image width")->check(CLI::PositiveNumber);
    app->add_option("--bands", bands, "Spectral bands L");
    app->add_option("--endmembers", endmembers, "Endmembers P");
    if (with_snr) app->add_option("--snr", snr, "Noise level in dB");
    app->add_option("--dirichlet-alpha", alpha, "Dirichlet concentration");
    app->add_flag("--no-pure-pixels", no_pure, "Skip the one-hot pure pixels");
  }
  SynthSpec spec(std::uint64_t seed) const {
    SynthSpec s;
    s.height = height;
    s.width = width;
    s.bands = bands;
    s.endmembers = endmembers;
    s.snr_db = snr;
    s.seed = seed;
    s.dirichlet_alpha = alpha;
    s.purity_pixels = !no_pure;
    return s;
  }
};

struct ModelFlags {
  std::size_t epochs = 200;
  double lr = 1e-3, weight_decay = 1e-5, beta = 0.3;
  std::size_t k_steps = 3, radius = 1, patch_size = 4;
  std::size_t channels = 32, token_dim = 64, fused = 64;
  double sigma_f = 1.0, sigma_g = 0.0;
  bool square_sigma_f = false;
  std::string ablation = "dynamic";

  void add(CLI::App* app, bool with_beta, bool with_ablation) {
    app->add_option("--epochs", epochs, "Training epochs");
    app->add_option("--lr", lr, "Learning rate");
    app->add_option("--weight-decay", weight_decay, "Decoupled weight decay");
    if (with_beta) app->add_option("--beta", beta, "Graph residual weight");
    app->add_option("--k-steps", k_steps, "Propagation hops K");
    app->add_option("--radius", radius, "Graph window radius r");
    app->add_option("--patch-size", patch_size, "Spatial patch size m");
    app->add_option("--channels", channels, "Compressed channels C");
    app->add_option("--token-dim", token_dim, "Token width D = S");
    app->add_option("--fused-channels", fused, "Fused channels B");
    app->add_option("--sigma-f", sigma_f, "Feature bandwidth");
    app->add_option("--sigma-g", sigma_g, "Spatial bandwidth (0: (2r)^2)");
    app->add_flag("--square-sigma-f", square_sigma_f, "Divide by sigma_f squared");
    if (with_ablation) {
      app->add_option("--ablation", ablation, "Graph case")->check(CLI::IsMember({"none", "static", "dynamic"}));
    }
  }
  TrainConfig config(std::size_t bands, std::size_t endmembers, std::uint64_t seed) const {
    TrainConfig c;
    c.model.bands = bands;
    c.model.endmembers = endmembers;
    c.model.channels = channels;
    c.model.spectral_dim = token_dim;
    c.model.spatial_dim = token_dim;
    c.model.fused_channels = fused;
    c.model.patch_size = patch_size;
    c.model.k_steps = k_steps;
    c.model.radius = radius;
    c.model.sigma_f = sigma_f;
    c.model.sigma_g = sigma_g;
    c.model.square_sigma_f = square_sigma_f;
    c.model.beta = beta;
    c.model.graph_mode = parse_graph_mode(ablation);
    c.lr = lr;
    c.weight_decay = weight_decay;
    c.epochs = epochs;
    c.seed = seed;
    return c;
  }
};

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

void print_summary(const std::vector<RunOutcome>& outcomes) {
  std::cout << std::left << std::setw(10) << "key" << std::setw(14) << "median_sad" << std::setw(14) << "median_rmse"
            << "runs\n";
  for (const auto& s : summarize(outcomes)) {
    std::cout << std::left << std::setw(10) << s.key << std::setw(14) << s.median_sad << std::setw(14)
              << s.median_rmse << s.runs << '\n';
  }
}

std::vector<RunOutcome> run_sweep(const std::vector<RunSpec>& runs, const std::filesystem::path& out_dir,
                                  const std::string& name) {
  const std::size_t threads = worker_threads_from_env();
  std::cerr << name << ": " << runs.size() << " runs on " << threads << " thread(s)\n";
  const auto outcomes = run_all(runs, threads);
  for (const auto& o : outcomes) {
    std::cerr << "  " << o.spec.key << " seed " << o.spec.train.seed << " mean_sad " << o.metrics.mean_sad
              << " rmse " << o.metrics.rmse << " graph " << (o.graph_fingerprint.empty() ? "bypassed" : o.graph_fingerprint)
              << '\n';
  }
  std::ostringstream csv, metrics;
  write_sweep_csv(csv, outcomes);
  write_sweep_metrics(metrics, outcomes);
  write_file(out_dir / (name + ".csv"), csv.str());
  write_file(out_dir / (name + "_metrics.csv"), metrics.str());
  print_summary(outcomes);
  return outcomes;
}

HsiCube load_data(const std::string& path) {
  HsiCube cube = read_container(path);
  cube.validate();
  return cube;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer with content-adaptive graph unmixing"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic scene container");
  SceneFlags gen_scene;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  gen_scene.add(gen, true);
  gen->add_option("--seed", gen_seed, "Random seed");
  gen->add_option("--out", gen_out, "Output container")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train on a container");
  ModelFlags tr_model;
  std::string tr_data, tr_ckpt, tr_resume;
  std::uint64_t tr_seed = 0;
  std::optional<std::size_t> tr_p;
  std::size_t tr_log_every = 1;
  tr_model.add(tr, true, true);
  tr->add_option("--data", tr_data, "Input container")->required();
  tr->add_option("--checkpoint", tr_ckpt, "Output checkpoint")->required();
  tr->add_option("--seed", tr_seed, "Random seed");
  tr->add_option("--endmembers", tr_p, "P, when the container has no ground truth");
  tr->add_option("--resume", tr_resume, "Continue from this checkpoint for --epochs more epochs");
  tr->add_option("--log-every", tr_log_every, "Log every n epochs")->check(CLI::PositiveNumber);

  // eval
  auto* ev = app.add_subcommand("eval", "Score a checkpoint against ground truth");
  std::string ev_data, ev_ckpt, ev_out;
  ev->add_option("--data", ev_data, "Container with ground truth")->required();
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint")->required();
  ev->add_option("--out-dir", ev_out, "Directory for metrics.csv")->required();

  // sweeps
  auto* snr = app.add_subcommand("sweep-snr", "SAD/RMSE across noise levels");
  std::vector<double> snr_levels = {10, 20, 30, 40};
  std::size_t snr_seeds = 3;
  std::string snr_out = ".";
  SceneFlags snr_scene;
  ModelFlags snr_model;
  snr->add_option("--snrs", snr_levels, "SNR levels in dB")->delimiter(',');
  snr->add_option("--seeds", snr_seeds, "Seeds per level");
  snr->add_option("--out-dir", snr_out, "Directory for the CSV reports");
  snr_scene.add(snr, false);
  snr_model.add(snr, true, true);

  auto* bs = app.add_subcommand("sweep-beta", "SAD/RMSE across the graph weight");
  std::vector<double> bs_levels = {0, 0.2, 0.4, 0.6, 0.8, 1.0};
  std::size_t bs_seeds = 3;
  std::string bs_out = ".";
  SceneFlags bs_scene;
  ModelFlags bs_model;
  bs->add_option("--betas", bs_levels, "Beta values")->delimiter(',');
  bs->add_option("--seeds", bs_seeds, "Seeds per beta");
  bs->add_option("--out-dir", bs_out, "Directory for the CSV reports");
  bs_scene.add(bs, true);
  bs_model.add(bs, false, true);

  auto* ab = app.add_subcommand("ablate", "No graph vs static grid vs content-adaptive graph");
  std::size_t ab_seeds = 5;
  std::string ab_out = ".";
  SceneFlags ab_scene;
  ModelFlags ab_model;
  ab->add_option("--seeds", ab_seeds, "Seeds per case");
  ab->add_option("--out-dir", ab_out, "Directory for the CSV reports");
  ab_scene.add(ab, true);
  ab_model.add(ab, true, false);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every parameter group");
  GradcheckOptions gc_opt;
  std::string gc_fault;
  gc->add_option("--seed", gc_opt.seed, "Random seed");
  gc->add_option("--step", gc_opt.step, "Central-difference step");
  gc->add_option("--freeze", gc_opt.frozen, "Parameter group to exclude");
  gc->add_option("--inject-fault", gc_fault, "op[:factor]")->group("");

  // export
  auto* ex = app.add_subcommand("export", "Write abundance maps as PGM images");
  std::string ex_data, ex_ckpt, ex_out;
  ex->add_option("--checkpoint", ex_ckpt, "Checkpoint")->required();
  ex->add_option("--data", ex_data, "Container")->required();
  ex->add_option("--out-dir", ex_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      const HsiCube cube = generate_synthetic(gen_scene.spec(gen_seed));
      write_container(cube, gen_out);
      std::cerr << "wrote " << gen_out << " (" << cube.bands << "x" << cube.height << "x" << cube.width << ", P "
                << cube.endmembers() << ")\n";
    } else if (*tr) {
      const HsiCube cube = load_data(tr_data);
      TrainState state;
      std::size_t epochs = tr_model.epochs;
      if (!tr_resume.empty()) {
        state = load_checkpoint(tr_resume);
        if (state.config.model.bands != cube.bands) {
          throw ConfigError("checkpoint expects " + std::to_string(state.config.model.bands) + " bands, data has " +
                            std::to_string(cube.bands));
        }
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        state.config.epochs += epochs;
        std::cerr << "resuming at epoch " << state.epoch << '\n';
      } else {
        const std::size_t p = tr_p ? *tr_p : cube.endmembers();
        if (p == 0) throw ConfigError("container has no ground truth; pass --endmembers");
        if (tr_p && cube.endmembers() && *tr_p != cube.endmembers()) {
          throw ConfigError("--endmembers " + std::to_string(*tr_p) + " disagrees with the container's P = " +
                            std::to_string(cube.endmembers()));
        }
        TrainConfig cfg = tr_model.config(cube.bands, p, tr_seed);
        cfg.data_path = tr_data;
        cfg.checkpoint_path = tr_ckpt;
        state = start_training(cfg, cube);
      }
      const std::size_t total = state.config.epochs;
      run_epochs(state, cube, epochs, [&](const EpochReport& r) {
        if (r.epoch % tr_log_every && r.epoch != total) return;
        std::cerr << "epoch " << r.epoch << "/" << total << " loss " << std::setprecision(8) << r.loss << " re "
                  << r.reconstruction << " sad " << r.angle << " graph "
                  << (r.forward->graph_fingerprint.empty() ? "bypassed" : r.forward->graph_fingerprint) << '\n';
      });
      save_checkpoint(state, tr_ckpt);
      std::cerr << "wrote " << tr_ckpt << '\n';
    } else if (*ev) {
      const HsiCube cube = load_data(ev_data);
      if (!cube.gt_endmembers || !cube.gt_abundances) throw ConfigError(ev_data + " has no ground truth to score against");
      TrainState state = load_checkpoint(ev_ckpt);
      if (state.config.model.bands != cube.bands || state.config.model.endmembers != cube.endmembers()) {
        throw ConfigError("checkpoint shape (L " + std::to_string(state.config.model.bands) + ", P " +
                          std::to_string(state.config.model.endmembers) + ") does not match the data");
      }
      ad::Tape tape;
      const ForwardResult fwd = forward(tape, state.params, state.config.model, cube_tensor(cube));
      const UnmixResult r = evaluate(state.params.decoder.endmember_matrix(), abundance_matrix(fwd),
                                     *cube.gt_endmembers, cube.abundance_matrix());
      std::ostringstream csv;
      write_metrics_header(csv);
      write_metrics_rows(csv, std::filesystem::path(ev_data).stem().string(), state.config.seed, std::nullopt, r);
      write_file(std::filesystem::path(ev_out) / "metrics.csv", csv.str());
      std::cout << "mean_sad " << r.mean_sad << " rmse " << r.rmse << '\n';
    } else if (*snr) {
      const auto runs = snr_sweep_runs(snr_model.config(snr_scene.bands, snr_scene.endmembers, 0),
                                       snr_scene.spec(0), snr_levels, snr_seeds);
      const auto outcomes = run_sweep(runs, snr_out, "sweep_snr");
      if (!snr_trend_holds(outcomes)) {
        std::cerr << "error: median SAD at the highest SNR exceeds the lowest SNR\n";
        return 1;
      }
      std::cout << "trend: ok\n";
    } else if (*bs) {
      const auto runs = beta_sweep_runs(bs_model.config(bs_scene.bands, bs_scene.endmembers, 0), bs_scene.spec(0),
                                        bs_levels, bs_seeds);
      const auto outcomes = run_sweep(runs, bs_out, "sweep_beta");
      std::cout << "best beta interior: " << (best_beta_is_interior(outcomes) ? "yes" : "no") << '\n';
    } else if (*ab) {
      const auto runs = ablation_runs(ab_model.config(ab_scene.bands, ab_scene.endmembers, 0), ab_scene.spec(0),
                                      ab_seeds);
      const auto outcomes = run_sweep(runs, ab_out, "ablation");
      if (!ablation_order_holds(outcomes)) {
        std::cerr << "warning: median SAD order dynamic <= static <= none does not hold\n";
      } else {
        std::cout << "order: dynamic <= static <= none\n";
      }
    } else if (*gc) {
      if (!gc_fault.empty()) {
        const auto colon = gc_fault.find(':');
        const double factor = colon == std::string::npos ? 1.5 : std::stod(gc_fault.substr(colon + 1));
        ad::set_backward_fault(gc_fault.substr(0, colon), factor);
      }
      bool ok = true;
      for (const auto& g : gradcheck(gc_opt)) {
        const bool pass = g.max_rel_error < 1e-4;
        ok = ok && pass;
        std::cout << std::left << std::setw(28) << g.name << std::setw(8) << g.size << std::scientific
                  << std::setprecision(3) << g.max_rel_error << (pass ? "  ok" : "  FAIL") << std::defaultfloat << '\n';
      }
      return ok ? 0 : 1;
    } else if (*ex) {
      const HsiCube cube = load_data(ex_data);
      const TrainState state = load_checkpoint(ex_ckpt);
      if (state.config.model.bands != cube.bands) throw ConfigError("checkpoint and data disagree on L");
      const ExportResult r = export_abundance_maps(state, cube, ex_out, std::filesystem::path(ex_data).stem().string());
      for (const auto& p : r.maps) std::cerr << "wrote " << p.string() << '\n';
      if (r.metrics) std::cout << "mean_sad " << r.metrics->mean_sad << " rmse " << r.metrics->rmse << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const SpecError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
