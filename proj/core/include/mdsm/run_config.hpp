#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace mdsm {

struct ModelConfig {
  std::int64_t image_size = 64;
  std::int64_t c1 = 32;
  std::int64_t blocks = 4;
  std::int64_t c_clp = 512;
  std::int64_t text_dim = 64;
  std::int64_t text_layers = 2;
  std::int64_t text_heads = 4;
  std::int64_t max_tokens = 20;
  bool use_global_branch = true;
  bool train_text_encoder = true;
};

struct OptimizerConfig {
  std::int64_t epochs = 11;
  std::int64_t batch_size = 16;
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 0.01;
};

struct Stage2Config {
  OptimizerConfig optimizer{5, 1, 1e-3, 0.9, 0.99, 0.0};
  std::int64_t warmup_epochs = 3;
  std::int64_t patience = 50;
  double holdout_fraction = 0.2;  // share of the stage-2 split used for early stopping
};

struct DiffusionConfig {
  std::int64_t steps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::int64_t t_infer = 50;
  std::vector<std::int64_t> level_selection{0, 1, 2};
  bool clamp_probability = true;
  std::int64_t base_channels = 16;
  std::uint64_t noise_seed = 1234;
  OptimizerConfig optimizer{4, 16, 2e-3, 0.9, 0.999, 0.0};
};

/// Everything a run needs. Defaults for the two segmentation stages follow the
/// reference hyperparameters (11 / 5 epochs, batch 16 / 1, lr 5e-5 / 1e-3, betas 0.9 / 0.99).
struct RunConfig {
  std::uint64_t seed = 0;
  std::string data_dir;
  std::string run_dir;
  ModelConfig model;
  OptimizerConfig stage1;
  Stage2Config stage2;
  DiffusionConfig diffusion;
  std::string lr_schedule = "constant";
  std::int64_t train_limit = 0;  // > 0 keeps only the first N training samples
  bool verbose = false;
};

std::string to_json(const RunConfig& config, int indent = 2);
/// Missing keys keep their defaults; unknown keys are rejected.
RunConfig run_config_from_json(std::string_view text);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& config);

/// Throws ConfigError for out-of-range values.
void validate(const RunConfig& config);

}  // namespace mdsm
