#include "mdsm/diffusion_refiner.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <iostream>
#include <set>

#include "mdsm/errors.hpp"

namespace mdsm {

namespace F = torch::nn::functional;

namespace {

void check_step(std::int64_t t, const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.steps()) {
    throw InvalidInputError("diffusion step " + std::to_string(t) + " outside [1, " +
                            std::to_string(schedule.steps()) + "]");
  }
}

torch::nn::Conv2d conv3x3(std::int64_t in, std::int64_t out, std::int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

}  // namespace

std::size_t NoiseSchedule::index(std::int64_t t) const {
  if (t < 1 || t > steps()) throw std::out_of_range("diffusion step out of range");
  return static_cast<std::size_t>(t - 1);
}

NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ConfigError("noise schedule needs at least one step");
  NoiseSchedule schedule;
  double running = 1.0;
  for (double beta : betas) {
    if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("every beta must lie in (0, 1)");
    schedule.betas.push_back(beta);
    schedule.alphas.push_back(1.0 - beta);
    running *= 1.0 - beta;
    schedule.alpha_bars.push_back(running);
  }
  return schedule;
}

NoiseSchedule build_schedule(std::int64_t steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule needs 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (std::int64_t i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + frac * (beta_end - beta_start);
  }
  return schedule_from_betas(std::move(betas));
}

torch::Tensor forward_noise(const torch::Tensor& x0, std::int64_t t, const NoiseSchedule& schedule,
                            const std::optional<torch::Tensor>& noise, std::optional<torch::Generator> generator) {
  check_step(t, schedule);
  torch::Tensor eps;
  if (noise) {
    if (noise->sizes() != x0.sizes()) throw ShapeError("noise must match the image shape");
    eps = *noise;
  } else {
    eps = torch::randn(x0.sizes(), generator, x0.options());
  }
  const double a = schedule.alpha_bar(t);
  return std::sqrt(a) * x0 + std::sqrt(1.0 - a) * eps;
}

torch::Tensor estimate_x0(const torch::Tensor& x_t, const torch::Tensor& eps_hat, std::int64_t t,
                          const NoiseSchedule& schedule) {
  check_step(t, schedule);
  if (x_t.sizes() != eps_hat.sizes()) throw ShapeError("x_t and eps_hat shapes differ");
  const double a = schedule.alpha_bar(t);
  return (x_t - std::sqrt(1.0 - a) * eps_hat) / std::sqrt(a);
}

torch::Tensor timestep_table(std::int64_t steps, std::int64_t dim) {
  const std::int64_t half = dim / 2;
  auto t = torch::arange(1, steps + 1, torch::kFloat64).unsqueeze(1);
  auto freqs = torch::exp(torch::arange(half, torch::kFloat64) * (-std::log(10000.0) / static_cast<double>(half)));
  auto angles = t * freqs.unsqueeze(0);
  return torch::cat({torch::sin(angles), torch::cos(angles)}, 1).to(torch::kFloat32);
}

TimeBlockImpl::TimeBlockImpl(std::int64_t in, std::int64_t out, std::int64_t time_dim) {
  conv1_ = register_module("conv1", conv3x3(in, out));
  norm1_ = register_module("norm1", torch::nn::GroupNorm(group_count(out), out));
  time_ = register_module("time", torch::nn::Linear(time_dim, out));
  conv2_ = register_module("conv2", conv3x3(out, out));
  norm2_ = register_module("norm2", torch::nn::GroupNorm(group_count(out), out));
  if (in != out) {
    skip_ = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)));
  }
}

torch::Tensor TimeBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& time_embedding) {
  auto h = F::silu(norm1_(conv1_(x))) + time_(time_embedding).unsqueeze(-1).unsqueeze(-1);
  h = F::silu(norm2_(conv2_(h)));
  return h + (skip_.is_empty() ? x : skip_(x));
}

DenoiserImpl::DenoiserImpl(const DenoiserOptions& options) : options_(options) {
  if (static_cast<std::int64_t>(options.level_channels.size()) != kDenoiserLevels) {
    throw ConfigError("denoiser needs exactly four level widths");
  }
  const auto& ch = options.level_channels;
  const std::int64_t base = options.base;
  const std::int64_t td = options.time_dim;

  time_table_ = register_buffer("time_table", timestep_table(options.steps, td));
  time_mlp_ = register_module("time_mlp", torch::nn::Sequential(torch::nn::Linear(td, td), torch::nn::SiLU(),
                                                                  torch::nn::Linear(td, td)));
  stem_ = register_module("stem", conv3x3(options.in_channels, base));
  enc_full_ = register_module("enc_full", TimeBlock(base, base, td));
  down_half_ = register_module("down_half", conv3x3(base, base, 2));
  enc_half_ = register_module("enc_half", TimeBlock(base, base, td));
  level_down_ = register_module("level_down", torch::nn::ModuleList());
  level_enc_ = register_module("level_enc", torch::nn::ModuleList());
  level_dec_ = register_module("level_dec", torch::nn::ModuleList());
  std::int64_t prev = base;
  for (std::int64_t k = 0; k < kDenoiserLevels; ++k) {
    const auto c = ch[static_cast<std::size_t>(k)];
    level_down_->push_back(conv3x3(prev, c, 2));
    level_enc_->push_back(TimeBlock(c, c, td));
    prev = c;
  }
  mid_ = register_module("mid", TimeBlock(ch[3], ch[3], td));
  for (std::int64_t k = 0; k + 1 < kDenoiserLevels; ++k) {
    const auto c = ch[static_cast<std::size_t>(k)];
    level_dec_->push_back(TimeBlock(ch[static_cast<std::size_t>(k + 1)] + c, c, td));
  }
  dec_half_ = register_module("dec_half", TimeBlock(ch[0] + base, base, td));
  dec_full_ = register_module("dec_full", TimeBlock(base + base, base, td));
  out_ = register_module("out", conv3x3(base, options.in_channels));
  torch::NoGradGuard no_grad;
  out_->weight.zero_();
  out_->bias.zero_();
}

torch::Tensor DenoiserImpl::embed_time(const torch::Tensor& t) {
  auto rows = time_table_.index_select(0, t.to(torch::kInt64) - 1);
  return time_mlp_->forward(rows.to(stem_->weight.scalar_type()));
}

DenoiserOutput DenoiserImpl::forward(const torch::Tensor& x_t, const torch::Tensor& t) {
  if (x_t.dim() != 4 || x_t.size(1) != options_.in_channels) throw ShapeError("denoiser expects [B, C_in, H, W]");
  if (x_t.size(2) % 32 != 0 || x_t.size(3) % 32 != 0) throw ShapeError("denoiser input side must be divisible by 32");
  if (t.dim() != 1 || t.size(0) != x_t.size(0)) throw ShapeError("denoiser expects one step per batch row");

  const auto temb = embed_time(t);
  auto full = enc_full_(stem_(x_t), temb);
  auto half = enc_half_(down_half_(full), temb);

  DenoiserOutput out;
  auto prev = half;
  for (std::int64_t k = 0; k < kDenoiserLevels; ++k) {
    const auto idx = static_cast<std::size_t>(k);
    prev = level_enc_->ptr<TimeBlockImpl>(idx)->forward(level_down_[idx]->as<torch::nn::Conv2d>()->forward(prev), temb);
    out.encoder_levels.push_back(prev);
  }
  out.decoder_levels.resize(kDenoiserLevels);
  out.decoder_levels[3] = mid_(out.encoder_levels[3], temb);
  for (std::int64_t k = kDenoiserLevels - 2; k >= 0; --k) {
    const auto idx = static_cast<std::size_t>(k);
    const auto& skip = out.encoder_levels[idx];
    auto up = resize_bilinear(out.decoder_levels[idx + 1], skip.size(2), skip.size(3));
    out.decoder_levels[idx] = level_dec_->ptr<TimeBlockImpl>(idx)->forward(torch::cat({up, skip}, 1), temb);
  }
  auto h = dec_half_(torch::cat({resize_bilinear(out.decoder_levels[0], half.size(2), half.size(3)), half}, 1), temb);
  h = dec_full_(torch::cat({resize_bilinear(h, full.size(2), full.size(3)), full}, 1), temb);
  out.noise = out_(h);
  return out;
}

torch::Tensor denoiser_loss(const torch::Tensor& predicted, const torch::Tensor& injected) {
  if (predicted.sizes() != injected.sizes()) throw ShapeError("noise shapes differ");
  return F::mse_loss(predicted, injected);
}

DenoiserTrainStats train_denoiser(Denoiser& denoiser, const torch::Tensor& images, const NoiseSchedule& schedule,
                                  const DenoiserTrainOptions& options) {
  if (images.dim() != 4 || images.size(0) == 0) throw TrainingError("denoiser training needs a nonempty image batch");
  if (options.batch_size < 1) throw ConfigError("batch size must be positive");
  auto gen = at::make_generator<at::CPUGeneratorImpl>(options.seed);
  const auto alpha_bars = torch::tensor(schedule.alpha_bars, torch::kFloat64).to(images.scalar_type());
  torch::optim::Adam optimizer(denoiser->parameters(), torch::optim::AdamOptions(options.learning_rate));
  denoiser->train();

  DenoiserTrainStats stats;
  const auto n = images.size(0);
  for (std::int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    auto order = torch::randperm(n, gen, torch::kInt64);
    double total = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t start = 0; start < n; start += options.batch_size) {
      auto idx = order.narrow(0, start, std::min(options.batch_size, n - start));
      auto x0 = images.index_select(0, idx);
      auto t = torch::randint(1, schedule.steps() + 1, {x0.size(0)}, gen, torch::kInt64);
      auto eps = torch::randn(x0.sizes(), gen, x0.options());
      auto a = alpha_bars.index_select(0, t - 1).view({-1, 1, 1, 1});
      auto x_t = a.sqrt() * x0 + (1.0 - a).sqrt() * eps;

      optimizer.zero_grad();
      auto loss = denoiser_loss(denoiser->forward(x_t, t).noise, eps);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        throw TrainingError("denoiser loss became non-finite at epoch " + std::to_string(epoch));
      }
      loss.backward();
      optimizer.step();
      total += value;
      ++batches;
      ++stats.steps;
    }
    stats.epoch_losses.push_back(total / static_cast<double>(batches));
    if (options.verbose) {
      std::cerr << "[ddpm] epoch " << epoch + 1 << "/" << options.epochs << " loss " << stats.epoch_losses.back()
                << '\n';
    }
  }
  stats.final_epoch_loss = stats.epoch_losses.empty() ? 0.0 : stats.epoch_losses.back();
  denoiser->eval();
  return stats;
}

void check_level_selection(const std::vector<std::int64_t>& selection) {
  if (selection.empty()) throw ConfigError("level selection must not be empty");
  std::set<std::int64_t> seen;
  for (auto level : selection) {
    if (level < 0 || level >= kDenoiserLevels) throw ConfigError("level index must lie in [0, 3]");
    if (!seen.insert(level).second) throw ConfigError("duplicate level in selection");
  }
}

std::vector<torch::Tensor> level_estimates(const DenoiserOutput& output, std::int64_t t, const NoiseSchedule& schedule,
                                           const std::vector<std::int64_t>& selection) {
  check_level_selection(selection);
  std::vector<torch::Tensor> estimates;
  for (auto level : selection) {
    const auto idx = static_cast<std::size_t>(level);
    estimates.push_back(estimate_x0(output.encoder_levels.at(idx), output.decoder_levels.at(idx), t, schedule));
  }
  return estimates;
}

LevelFusionImpl::LevelFusionImpl(std::vector<std::int64_t> stack_channels, std::vector<std::int64_t> level_channels,
                                 std::vector<std::int64_t> selection)
    : stack_channels_(std::move(stack_channels)),
      level_channels_(std::move(level_channels)),
      selection_(std::move(selection)) {
  check_level_selection(selection_);
  projections_ = register_module("projections", torch::nn::ModuleList());
  for (auto level : selection_) {
    const auto idx = static_cast<std::size_t>(level);
    if (idx >= stack_channels_.size() || idx >= level_channels_.size()) {
      throw ConfigError("selected level " + std::to_string(level) + " is not available");
    }
    projections_->push_back(
        torch::nn::Conv2d(torch::nn::Conv2dOptions(stack_channels_[idx], level_channels_[idx], 1)));
  }
}

std::int64_t LevelFusionImpl::output_channels() const {
  std::int64_t total = 0;
  for (auto level : selection_) total += level_channels_[static_cast<std::size_t>(level)];
  return total;
}

LayerFeatureSet LevelFusionImpl::forward(const std::vector<torch::Tensor>& estimates,
                                         const DecodedFeatureStack& stack) {
  if (estimates.size() != selection_.size()) throw ShapeError("one estimate per selected level is required");
  if (stack.levels.empty()) throw ShapeError("empty decoded stack");
  const auto height = stack.finest().size(2);
  const auto width = stack.finest().size(3);

  LayerFeatureSet out;
  out.levels = selection_;
  std::vector<torch::Tensor> parts;
  for (std::size_t i = 0; i < selection_.size(); ++i) {
    const auto idx = static_cast<std::size_t>(selection_[i]);
    if (idx >= stack.levels.size()) throw ShapeError("stack has no level " + std::to_string(idx));
    auto projected = projections_[i]->as<torch::nn::Conv2d>()->forward(stack.levels[idx]);
    if (projected.sizes() != estimates[i].sizes()) {
      throw ShapeError("denoiser level " + std::to_string(idx) + " does not match the decoded stack geometry");
    }
    auto fused = estimates[i] + projected;
    out.fused.push_back(fused);
    out.resized.push_back(resize_bilinear(fused, height, width));
  }
  out.concatenated = torch::cat(out.resized, 1);
  return out;
}

LayerFeatureSet extract_and_fuse(const torch::Tensor& x_t, std::int64_t t, Denoiser& denoiser,
                                 const DecodedFeatureStack& stack, LevelFusion& fusion,
                                 const NoiseSchedule& schedule) {
  check_step(t, schedule);
  auto steps = torch::full({x_t.size(0)}, t, torch::kInt64);
  const auto output = denoiser->forward(x_t, steps);
  return fusion->forward(level_estimates(output, t, schedule, fusion->selection()), stack);
}

RefinementHeadImpl::RefinementHeadImpl(std::int64_t c_seg) {
  fc = register_module("fc", torch::nn::Conv2d(torch::nn::Conv2dOptions(c_seg, 1, 1)));
  bn = register_module("bn", torch::nn::BatchNorm2d(1));
  torch::NoGradGuard no_grad;
  bn->weight.zero_();
  bn->bias.zero_();
}

torch::Tensor RefinementHeadImpl::delta(const torch::Tensor& features) {
  if (features.dim() != 4 || features.size(1) != fc->options.in_channels()) {
    throw ShapeError("refinement head expects [B, C_seg, H_1, W_1]");
  }
  return bn(torch::relu(fc(features)));
}

ProbabilityMap RefinementHeadImpl::forward(const torch::Tensor& features, const torch::Tensor& p_it, bool clamp) {
  if (p_it.dim() != 4 || p_it.size(1) != 1 || p_it.size(0) != features.size(0)) {
    throw ShapeError("p_it must be [B, 1, H, W] with the feature batch size");
  }
  auto p = p_it + resize_bilinear(delta(features), p_it.size(2), p_it.size(3));
  if (clamp) p = p.clamp(0.0, 1.0);
  return {p, Stage::kDiffusion};
}

torch::Tensor diffusion_loss(const torch::Tensor& probability, const torch::Tensor& target) {
  if (probability.sizes() != target.sizes()) throw ShapeError("loss: prediction and mask shapes differ");
  return (probability - target.to(probability.scalar_type())).abs().mean();
}

}  // namespace mdsm
