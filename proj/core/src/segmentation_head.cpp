#include "mdsm/segmentation_head.hpp"

#include "mdsm/errors.hpp"

namespace mdsm {

namespace F = torch::nn::functional;

torch::Tensor resize_bilinear(const torch::Tensor& x, std::int64_t height, std::int64_t width) {
  if (x.size(2) == height && x.size(3) == width) return x;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{height, width})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

TopDownDecoderImpl::TopDownDecoderImpl(std::vector<std::int64_t> pyramid_channels, std::int64_t c_dec)
    : pyramid_channels_(std::move(pyramid_channels)), c_dec_(c_dec) {
  if (pyramid_channels_.empty()) throw ConfigError("decoder needs at least one pyramid level");
  fuse_ = register_module("fuse", torch::nn::ModuleList());
  const std::size_t m = pyramid_channels_.size();
  for (std::size_t j = 0; j + 1 < m; ++j) {
    const std::int64_t coarser = (j + 2 == m) ? pyramid_channels_[m - 1] : c_dec_;
    fuse_->push_back(torch::nn::Sequential(ConvNormAct(coarser + pyramid_channels_[j], c_dec_, 3, 1),
                                           ConvNormAct(c_dec_, c_dec_, 3, 1)));
  }
}

std::int64_t TopDownDecoderImpl::level_channels(std::size_t j) const {
  return j + 1 == pyramid_channels_.size() ? pyramid_channels_.back() : c_dec_;
}

DecodedFeatureStack TopDownDecoderImpl::forward(const std::vector<torch::Tensor>& multimodal) {
  const std::size_t m = pyramid_channels_.size();
  if (multimodal.size() != m) throw ShapeError("decoder expects one feature map per pyramid level");
  for (std::size_t j = 0; j < m; ++j) {
    if (multimodal[j].dim() != 4 || multimodal[j].size(1) != pyramid_channels_[j]) {
      throw ShapeError("pyramid level " + std::to_string(j) + " has the wrong channel count");
    }
  }
  DecodedFeatureStack stack;
  stack.levels.resize(m);
  stack.levels[m - 1] = multimodal[m - 1];
  for (std::size_t j = m - 1; j-- > 0;) {
    const auto& fine = multimodal[j];
    auto up = resize_bilinear(stack.levels[j + 1], fine.size(2), fine.size(3));
    stack.levels[j] = fuse_[j]->as<torch::nn::Sequential>()->forward(torch::cat({up, fine}, 1));
  }
  return stack;
}

SegmentationHeadImpl::SegmentationHeadImpl(std::int64_t c_dec) {
  classifier = register_module("classifier", torch::nn::Conv2d(torch::nn::Conv2dOptions(c_dec, 2, 1)));
}

torch::Tensor SegmentationHeadImpl::logits(const DecodedFeatureStack& stack) {
  if (stack.levels.empty()) throw ShapeError("empty decoded stack");
  return classifier(stack.finest());
}

ProbabilityMap SegmentationHeadImpl::forward(const DecodedFeatureStack& stack, std::int64_t height,
                                             std::int64_t width) {
  auto full = resize_bilinear(logits(stack), height, width);
  return {foreground_probability(full), Stage::kIntermediate};
}

torch::Tensor foreground_probability(const torch::Tensor& logits) {
  if (logits.dim() != 4 || logits.size(1) != 2) throw ShapeError("expected two-channel logits [B, 2, H, W]");
  return torch::softmax(logits, 1).narrow(1, 1, 1);
}

torch::Tensor binarize(const torch::Tensor& probability) { return probability.gt(0.5).to(torch::kUInt8); }

torch::Tensor intermediate_loss(const torch::Tensor& probability, const torch::Tensor& target) {
  if (probability.sizes() != target.sizes()) throw ShapeError("loss: prediction and mask shapes differ");
  auto p = probability.clamp(kProbabilityEpsilon, 1.0 - kProbabilityEpsilon);
  auto y = target.to(p.scalar_type());
  return -(y * torch::log(p) + (1.0 - y) * torch::log1p(-p)).mean();
}

}  // namespace mdsm
