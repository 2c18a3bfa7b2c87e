#pragma once

// Stage 2: forward noising, a small UNet noise predictor, per-level fusion of
// denoiser features with the stage-1 decoded stack, and the residual
// probability head  p_diff = clamp(p_it + BN(ReLU(FC(H_seg))), 0, 1).

#include <cstdint>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "mdsm/segmentation_head.hpp"

namespace mdsm {

/// beta_t, alpha_t = 1 - beta_t and alpha_bar_t = prod_{s<=t} alpha_s for t = 1..T.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  std::int64_t steps() const { return static_cast<std::int64_t>(betas.size()); }
  /// 1-based accessors; throw std::out_of_range outside [1, T].
  double beta(std::int64_t t) const { return betas.at(index(t)); }
  double alpha(std::int64_t t) const { return alphas.at(index(t)); }
  double alpha_bar(std::int64_t t) const { return alpha_bars.at(index(t)); }

 private:
  std::size_t index(std::int64_t t) const;
};

/// Linear beta ramp from beta_start to beta_end over T steps.
NoiseSchedule build_schedule(std::int64_t steps, double beta_start, double beta_end);
/// Schedule from explicit betas, each in (0, 1).
NoiseSchedule schedule_from_betas(std::vector<double> betas);

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps. When `noise` is empty a
/// standard normal draw is taken from `generator` (or the global generator).
torch::Tensor forward_noise(const torch::Tensor& x0, std::int64_t t, const NoiseSchedule& schedule,
                            const std::optional<torch::Tensor>& noise = std::nullopt,
                            std::optional<torch::Generator> generator = std::nullopt);

/// Single-step clean estimate (x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t).
torch::Tensor estimate_x0(const torch::Tensor& x_t, const torch::Tensor& eps_hat, std::int64_t t,
                          const NoiseSchedule& schedule);

inline constexpr std::int64_t kDenoiserLevels = 4;

struct DenoiserOptions {
  std::int64_t in_channels = 3;
  std::int64_t base = 16;
  std::vector<std::int64_t> level_channels{32, 64, 128, 256};  // at H/4, H/8, H/16, H/32
  std::int64_t steps = 100;
  std::int64_t time_dim = 64;
};

/// Sinusoidal embedding table [steps, dim]; row t - 1 embeds step t.
torch::Tensor timestep_table(std::int64_t steps, std::int64_t dim);

class TimeBlockImpl : public torch::nn::Module {
 public:
  TimeBlockImpl(std::int64_t in, std::int64_t out, std::int64_t time_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& time_embedding);

 private:
  torch::nn::Conv2d conv1_{nullptr};
  torch::nn::GroupNorm norm1_{nullptr};
  torch::nn::Linear time_{nullptr};
  torch::nn::Conv2d conv2_{nullptr};
  torch::nn::GroupNorm norm2_{nullptr};
  torch::nn::Conv2d skip_{nullptr};
};
TORCH_MODULE(TimeBlock);

struct DenoiserOutput {
  torch::Tensor noise;                        // eps_hat [B, C_in, H, W]
  std::vector<torch::Tensor> encoder_levels;  // x_t analog per level n_b
  std::vector<torch::Tensor> decoder_levels;  // eps_hat analog per level n_b
};

/// UNet noise predictor. Levels n_b = 0..3 sit at H/4 .. H/32 with matching
/// encoder and decoder widths.
class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(const DenoiserOptions& options);
  /// `t` is [B] int64 with 1-based steps.
  DenoiserOutput forward(const torch::Tensor& x_t, const torch::Tensor& t);

  const DenoiserOptions& options() const { return options_; }

 private:
  torch::Tensor embed_time(const torch::Tensor& t);

  DenoiserOptions options_;
  torch::Tensor time_table_;
  torch::nn::Sequential time_mlp_;
  torch::nn::Conv2d stem_{nullptr};
  TimeBlock enc_full_{nullptr};
  torch::nn::Conv2d down_half_{nullptr};
  TimeBlock enc_half_{nullptr};
  torch::nn::ModuleList level_down_;
  torch::nn::ModuleList level_enc_;
  TimeBlock mid_{nullptr};
  torch::nn::ModuleList level_dec_;  // levels 0..2
  TimeBlock dec_half_{nullptr};
  TimeBlock dec_full_{nullptr};
  torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(Denoiser);

struct DenoiserTrainOptions {
  std::int64_t epochs = 5;
  std::int64_t batch_size = 16;
  double learning_rate = 2e-3;
  std::uint64_t seed = 0;
  bool verbose = false;
};

struct DenoiserTrainStats {
  std::int64_t steps = 0;
  double final_epoch_loss = 0.0;
  std::vector<double> epoch_losses;
};

/// Minimizes E ||eps - eps_hat(x_t, t)||^2 over random (x0, t, eps).
/// Throws TrainingError on a non-finite loss.
DenoiserTrainStats train_denoiser(Denoiser& denoiser, const torch::Tensor& images, const NoiseSchedule& schedule,
                                  const DenoiserTrainOptions& options);

/// MSE between predicted and injected noise.
torch::Tensor denoiser_loss(const torch::Tensor& predicted, const torch::Tensor& injected);

/// Validates a level selection: nonempty, unique, each index in [0, 3].
void check_level_selection(const std::vector<std::int64_t>& selection);

/// x0-analog per selected level from one denoiser pass.
std::vector<torch::Tensor> level_estimates(const DenoiserOutput& output, std::int64_t t, const NoiseSchedule& schedule,
                                           const std::vector<std::int64_t>& selection);

struct LayerFeatureSet {
  std::vector<std::int64_t> levels;
  std::vector<torch::Tensor> fused;    // H'_seg^(n_b) = x0_hat^(n_b) + proj(H_it^(n_b))
  std::vector<torch::Tensor> resized;  // H_seg^(n_b) at H_1 x W_1
  torch::Tensor concatenated;          // H_seg [B, C_seg, H_1, W_1]

  std::int64_t channels() const { return concatenated.defined() ? concatenated.size(1) : 0; }
};

/// 1x1 projections aligning stack widths to denoiser level widths, then
/// add, resize to the finest stack level and concatenate.
class LevelFusionImpl : public torch::nn::Module {
 public:
  LevelFusionImpl(std::vector<std::int64_t> stack_channels, std::vector<std::int64_t> level_channels,
                  std::vector<std::int64_t> selection);

  LayerFeatureSet forward(const std::vector<torch::Tensor>& estimates, const DecodedFeatureStack& stack);

  std::int64_t output_channels() const;
  const std::vector<std::int64_t>& selection() const { return selection_; }

 private:
  std::vector<std::int64_t> stack_channels_;
  std::vector<std::int64_t> level_channels_;
  std::vector<std::int64_t> selection_;
  torch::nn::ModuleList projections_;
};
TORCH_MODULE(LevelFusion);

/// Runs the denoiser on (x_t, t) and fuses the selected levels with the stack.
LayerFeatureSet extract_and_fuse(const torch::Tensor& x_t, std::int64_t t, Denoiser& denoiser,
                                 const DecodedFeatureStack& stack, LevelFusion& fusion,
                                 const NoiseSchedule& schedule);

class RefinementHeadImpl : public torch::nn::Module {
 public:
  /// The batch-norm scale starts at zero so a fresh head adds no residual.
  explicit RefinementHeadImpl(std::int64_t c_seg);

  /// Delta p at feature resolution: BN(ReLU(FC(H_seg))), [B, 1, H_1, W_1].
  torch::Tensor delta(const torch::Tensor& features);
  /// p_it + resize(delta), clamped to [0, 1] when `clamp` is set.
  ProbabilityMap forward(const torch::Tensor& features, const torch::Tensor& p_it, bool clamp = true);

  torch::nn::Conv2d fc{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};
};
TORCH_MODULE(RefinementHead);

/// Mean absolute error between probabilities and a binary mask.
torch::Tensor diffusion_loss(const torch::Tensor& probability, const torch::Tensor& target);

}  // namespace mdsm
