#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "tcagu/train.hpp"

namespace tcagu {

/// One training run on a generated scene.
struct RunSpec {
  std::string sweep;  // "snr", "beta", "ablation"
  std::string key;    // level within the sweep, e.g. "10", "0.2", "dynamic"
  SynthSpec scene;
  TrainConfig train;
};

struct RunOutcome {
  RunSpec spec;
  UnmixResult metrics;
  double final_loss = 0.0;
  std::vector<double> loss_history;
  std::vector<double> final_parameters;  // every parameter, visit order
  std::string graph_fingerprint;         // empty when bypassed
};

/// Worker count from CAGU_THREADS (default 1). Throws ConfigError on a bad value.
std::size_t worker_threads_from_env();

/// Trains and evaluates every run; results keep the input order.
std::vector<RunOutcome> run_all(const std::vector<RunSpec>& runs, std::size_t threads);
RunOutcome run_one(const RunSpec& run);

/// Scene seed and model seed are both `seed`.
std::vector<RunSpec> snr_sweep_runs(const TrainConfig& base, const SynthSpec& scene, const std::vector<double>& snrs,
                                    std::size_t seeds);
std::vector<RunSpec> beta_sweep_runs(const TrainConfig& base, const SynthSpec& scene, const std::vector<double>& betas,
                                     std::size_t seeds);
/// Cases I (none), II (static), III (dynamic) per seed.
std::vector<RunSpec> ablation_runs(const TrainConfig& base, const SynthSpec& scene, std::size_t seeds);

/// Per-key medians in first-appearance order.
struct KeySummary {
  std::string key;
  double median_sad = 0.0;
  double median_rmse = 0.0;
  std::size_t runs = 0;
};
std::vector<KeySummary> summarize(const std::vector<RunOutcome>& outcomes);

/// sweep,key,seed,mean_sad,rmse,final_loss,graph: one row per run plus a
/// `median` row per key.
void write_sweep_csv(std::ostream& os, const std::vector<RunOutcome>& outcomes);
/// Per-endmember metrics rows for every run, dataset = "<sweep>-<key>".
void write_sweep_metrics(std::ostream& os, const std::vector<RunOutcome>& outcomes);

/// Median SAD at the highest SNR ≤ median SAD at the lowest.
bool snr_trend_holds(const std::vector<RunOutcome>& outcomes);
/// Median SAD ordering dynamic ≤ static ≤ none.
bool ablation_order_holds(const std::vector<RunOutcome>& outcomes);
/// Whether the β with the lowest median SAD is neither the smallest nor the largest β.
bool best_beta_is_interior(const std::vector<RunOutcome>& outcomes);

/// 8-bit binary PGM, 0 → 0 and 1 → 255 linearly, clamped.
void write_pgm(const std::filesystem::path& path, const std::vector<double>& values, std::size_t height,
               std::size_t width);
/// Values scaled back to [0, 1].
std::vector<double> read_pgm(const std::filesystem::path& path, std::size_t* height = nullptr,
                             std::size_t* width = nullptr);

struct ExportResult {
  std::vector<std::filesystem::path> maps;
  std::optional<UnmixResult> metrics;  // when the data carries ground truth
};

/// Runs the checkpointed model on `cube`; writes abundance_<k>.pgm per
/// endmember and metrics.csv into `out_dir` (created if missing).
ExportResult export_abundance_maps(const TrainState& state, const HsiCube& cube, const std::filesystem::path& out_dir,
                                   const std::string& dataset = "data");

struct GradGroup {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t size = 0;
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-4;
  std::vector<std::string> frozen;  // parameter names to exclude
};

/// Finite-difference check of every parameter group on a 6×6, 8-band, P = 2
/// random scene with C = D = S = B = 8, m = 2, K = 2 and the dynamic graph.
/// The init is redrawn until no leaky unit or pixel angle is near its kink.
std::vector<GradGroup> gradcheck(const GradcheckOptions& options = {});
ModelConfig gradcheck_config();

}  // namespace tcagu
