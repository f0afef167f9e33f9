#pragma once

#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "tcagu/hsi.hpp"
#include "tcagu/model.hpp"

namespace tcagu {

struct TrainConfig {
  ModelConfig model;
  double lr = 1e-3;
  double weight_decay = 1e-5;
  std::size_t epochs = 200;
  std::uint64_t seed = 0;
  std::string data_path;
  std::string checkpoint_path;

  /// Throws ConfigError.
  void validate() const;
};

std::string config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const std::string& text);

/// Parameters plus Adam moments (visit order) and progress counters.
struct TrainState {
  TrainConfig config;
  ModelParams params;
  std::vector<ad::Tensor> adam_m;
  std::vector<ad::Tensor> adam_v;
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double last_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> loss_history;
};

struct EpochReport {
  std::size_t epoch = 0;  // 1-based, after the step
  double loss = 0.0;      // before the step
  double reconstruction = 0.0;
  double angle = 0.0;
  const ForwardResult* forward = nullptr;
  const TrainState* state = nullptr;
};

using EpochObserver = std::function<void(const EpochReport&)>;

/// cube [L×H×W] from a container.
ad::Tensor cube_tensor(const HsiCube& cube);

/// Fresh state: VCA(seed) endmembers, random init from seed.
TrainState start_training(const TrainConfig& cfg, const HsiCube& cube);

/// Runs `epochs` full-image steps. Throws NumericDomainError naming the first
/// non-finite tensor when the loss stops being finite.
void run_epochs(TrainState& state, const HsiCube& cube, std::size_t epochs, const EpochObserver& observer = {});

/// start_training + run_epochs(cfg.epochs).
TrainState train(const TrainConfig& cfg, const HsiCube& cube, const EpochObserver& observer = {});

/// One AdamW step (β₁ 0.9, β₂ 0.999, ε 1e-8) over parameters holding a
/// gradient, then clamps the endmember kernel. Clears gradients.
void optimizer_step(TrainState& state);

std::vector<std::uint8_t> encode_checkpoint(const TrainState& state);
TrainState decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

/// Abundances as a P×N matrix.
Eigen::MatrixXd abundance_matrix(const ForwardResult& fwd);

}  // namespace tcagu
