#pragma once

// Model bundles for both stages, checkpoint directories and end-to-end inference.
//
// A run directory holds:
//   <run>/config.json
//   <run>/stage1/{checkpoint.json, weights.pt, optimizer.pt, vocab.txt}
//   <run>/ddpm/{checkpoint.json, weights.pt, optimizer.pt}
//   <run>/stage2/{checkpoint.json, weights.pt, optimizer.pt}

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mdsm/dataset_io.hpp"
#include "mdsm/diffusion_refiner.hpp"
#include "mdsm/multimodal_encoder.hpp"
#include "mdsm/run_config.hpp"
#include "mdsm/segmentation_head.hpp"
#include "mdsm/text_encoder.hpp"
#include "mdsm/vocabulary.hpp"

namespace mdsm {

struct Stage1Output {
  LanguageFeatures language;
  FeaturePyramid pyramid;
  DecodedFeatureStack stack;
  ProbabilityMap probability;  // at image resolution
};

inline constexpr std::int64_t kDecoderWidth = 32;

/// Text encoder, multimodal encoder, top-down decoder and stage-1 head.
class IntermediateModelImpl : public torch::nn::Module {
 public:
  IntermediateModelImpl(const ModelConfig& config, std::int64_t vocab_size);

  Stage1Output forward(const torch::Tensor& images, const torch::Tensor& tokens, const torch::Tensor& valid_lengths);

  /// Widths of the decoded stack entries, finest first.
  std::vector<std::int64_t> stack_channels() const;
  const ModelConfig& config() const { return config_; }

  TextEncoder text_encoder{nullptr};
  MultimodalEncoder encoder{nullptr};
  TopDownDecoder decoder{nullptr};
  SegmentationHead head{nullptr};

 private:
  ModelConfig config_;
};
TORCH_MODULE(IntermediateModel);

/// The trainable part of stage 2: level fusion and the residual head.
class RefinerImpl : public torch::nn::Module {
 public:
  RefinerImpl(const std::vector<std::int64_t>& stack_channels, const std::vector<std::int64_t>& level_channels,
              const std::vector<std::int64_t>& selection);

  ProbabilityMap forward(const std::vector<torch::Tensor>& estimates, const DecodedFeatureStack& stack,
                         const torch::Tensor& p_it, bool clamp = true);

  LevelFusion fusion{nullptr};
  RefinementHead head{nullptr};
};
TORCH_MODULE(Refiner);

NoiseSchedule make_schedule(const DiffusionConfig& config);
DenoiserOptions make_denoiser_options(const DiffusionConfig& config);
Refiner make_refiner(const IntermediateModel& stage1, const Denoiser& denoiser, const DiffusionConfig& config);

/// Standard normal [1, C, H, W] draw from a generator seeded with `seed`.
torch::Tensor fixed_noise(std::int64_t channels, std::int64_t height, std::int64_t width, std::uint64_t seed);

/// x0 analogs of the selected levels at t_infer. Every image is noised with the
/// same fixed draw, so the result does not depend on batch composition.
std::vector<torch::Tensor> denoiser_estimates(Denoiser& denoiser, const torch::Tensor& images,
                                              const DiffusionConfig& config, const NoiseSchedule& schedule);

struct CheckpointInfo {
  std::string stage;  // "stage1", "ddpm" or "stage2"
  RunConfig config;
  std::int64_t epoch = 0;
  std::int64_t iteration = 0;
  std::string best_metric_name;
  double best_metric = 0.0;
  std::int64_t vocab_size = 0;
  std::uint64_t vocab_hash = 0;
};

std::filesystem::path stage_dir(const std::filesystem::path& run_dir, const std::string& stage);

/// Writes checkpoint.json and weights.pt, plus optimizer.pt when `optimizer` is given.
void save_checkpoint(const std::filesystem::path& dir, const CheckpointInfo& info, torch::nn::Module& module,
                     torch::optim::Optimizer* optimizer = nullptr);
CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);
/// Throws TrainingError when the checkpoint is missing.
void load_weights(const std::filesystem::path& dir, torch::nn::Module& module);
void load_optimizer(const std::filesystem::path& dir, torch::optim::Optimizer& optimizer);

/// Clone of every parameter and buffer, keyed by name.
using ModuleSnapshot = std::vector<std::pair<std::string, torch::Tensor>>;
ModuleSnapshot snapshot(const torch::nn::Module& module);
void restore(torch::nn::Module& module, const ModuleSnapshot& state);

/// Stage-1 foreground probabilities [N, 1, H, W] for a split, in eval mode.
torch::Tensor predict_stage1(IntermediateModel& model, const SplitData& data, std::int64_t batch_size = 32);

struct Predictions {
  torch::Tensor p_it;    // [N, 1, H, W]
  torch::Tensor p_diff;  // [N, 1, H, W], undefined without a stage-2 model
};

struct InferResult {
  torch::Tensor p_it;    // [1, H, W]
  torch::Tensor mask_it; // [H, W] uint8
  std::optional<torch::Tensor> p_diff;
  std::optional<torch::Tensor> mask_diff;
  bool truncated = false;  // the instruction had more than l words
};

/// Trained models loaded from a run directory.
class Pipeline {
 public:
  /// Loads stage 1, and the denoiser plus refiner when `with_refiner` is set.
  static Pipeline load(const std::filesystem::path& run_dir, bool with_refiner);

  bool has_refiner() const { return !refiner.is_empty(); }
  Predictions predict(const SplitData& data, std::int64_t batch_size = 32);
  /// `image` is [3, H, W] in [0, 1].
  InferResult infer(const torch::Tensor& image, const std::string& instruction);

  RunConfig config;
  Vocabulary vocab;
  NoiseSchedule schedule;
  IntermediateModel stage1{nullptr};
  Denoiser denoiser{nullptr};
  Refiner refiner{nullptr};
};

}  // namespace mdsm
