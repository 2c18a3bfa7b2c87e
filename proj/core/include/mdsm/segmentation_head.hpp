#pragma once

// Top-down decoding of the multimodal pyramid into the stage-1 probability map.

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "mdsm/multimodal_encoder.hpp"

namespace mdsm {

/// Decoded features H_it^(j), j = 0 (finest) .. M-1 (coarsest).
/// The coarsest entry is F_M itself; all others have `c_dec` channels.
struct DecodedFeatureStack {
  std::vector<torch::Tensor> levels;

  std::size_t size() const { return levels.size(); }
  const torch::Tensor& finest() const { return levels.front(); }
};

enum class Stage { kIntermediate, kDiffusion };

struct ProbabilityMap {
  torch::Tensor values;  // [B, 1, H, W] foreground probability
  Stage stage = Stage::kIntermediate;
};

/// Bilinear resize of an NCHW tensor (align_corners = false).
torch::Tensor resize_bilinear(const torch::Tensor& x, std::int64_t height, std::int64_t width);

/// H^(M) = F_M; H^(i) = Conv([up(H^(i+1)); F_i]).
class TopDownDecoderImpl : public torch::nn::Module {
 public:
  TopDownDecoderImpl(std::vector<std::int64_t> pyramid_channels, std::int64_t c_dec);
  DecodedFeatureStack forward(const std::vector<torch::Tensor>& multimodal);

  /// Channel width of stack entry j.
  std::int64_t level_channels(std::size_t j) const;

 private:
  std::vector<std::int64_t> pyramid_channels_;
  std::int64_t c_dec_;
  torch::nn::ModuleList fuse_;  // fuse_[j] builds level j, j < M - 1
};
TORCH_MODULE(TopDownDecoder);

/// 1x1 conv to (background, foreground) logits on the finest level.
class SegmentationHeadImpl : public torch::nn::Module {
 public:
  explicit SegmentationHeadImpl(std::int64_t c_dec);

  /// Low-resolution logits [B, 2, H_1, W_1].
  torch::Tensor logits(const DecodedFeatureStack& stack);
  /// Logits resized bilinearly to (height, width), then softmax; returns the foreground channel.
  ProbabilityMap forward(const DecodedFeatureStack& stack, std::int64_t height, std::int64_t width);

  torch::nn::Conv2d classifier{nullptr};
};
TORCH_MODULE(SegmentationHead);

/// Softmax over the two logit channels, foreground channel kept: [B, 2, h, w] -> [B, 1, h, w].
torch::Tensor foreground_probability(const torch::Tensor& logits);

/// 1 where p > 0.5 (strict), as uint8.
torch::Tensor binarize(const torch::Tensor& probability);

inline constexpr double kProbabilityEpsilon = 1e-7;

/// Mean per-pixel two-class cross entropy with p clamped to [eps, 1 - eps].
torch::Tensor intermediate_loss(const torch::Tensor& probability, const torch::Tensor& target);

}  // namespace mdsm
