#include "mdsm/text_encoder.hpp"

#include <cmath>

#include "mdsm/errors.hpp"

namespace mdsm {

namespace F = torch::nn::functional;

torch::Tensor valid_mask(const torch::Tensor& valid_lengths, std::int64_t max_length) {
  auto positions = torch::arange(max_length, valid_lengths.options().dtype(torch::kInt64));
  return positions.unsqueeze(0).lt(valid_lengths.to(torch::kInt64).unsqueeze(1));
}

SelfAttentionImpl::SelfAttentionImpl(std::int64_t dim, std::int64_t heads) : heads_(heads) {
  if (dim % heads != 0) throw ConfigError("text dim must be divisible by the head count");
  qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  out_ = register_module("out", torch::nn::Linear(dim, dim));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& valid) {
  const auto b = x.size(0);
  const auto l = x.size(1);
  const auto dim = x.size(2);
  const auto head_dim = dim / heads_;
  auto parts = qkv_(x).view({b, l, 3, heads_, head_dim}).permute({2, 0, 3, 1, 4});
  auto q = parts[0];
  auto k = parts[1];
  auto v = parts[2];
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
  // A large finite fill keeps all-padding rows finite; padded keys still get exactly zero weight.
  scores = scores.masked_fill(valid.logical_not().view({b, 1, 1, l}), -1e9);
  auto context = torch::matmul(torch::softmax(scores, -1), v);
  return out_(context.permute({0, 2, 1, 3}).reshape({b, l, dim}));
}

TransformerLayerImpl::TransformerLayerImpl(std::int64_t dim, std::int64_t heads, std::int64_t ff_dim) {
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  attn_ = register_module("attn", SelfAttention(dim, heads));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  ff1_ = register_module("ff1", torch::nn::Linear(dim, ff_dim));
  ff2_ = register_module("ff2", torch::nn::Linear(ff_dim, dim));
}

torch::Tensor TransformerLayerImpl::forward(const torch::Tensor& x, const torch::Tensor& valid) {
  auto h = x + attn_(norm1_(x), valid);
  return h + ff2_(F::gelu(ff1_(norm2_(h))));
}

TextEncoderImpl::TextEncoderImpl(const TextEncoderOptions& options) : options_(options) {
  if (options.vocab_size < 2 || options.dim < 1 || options.max_length < 1 || options.layers < 0) {
    throw ConfigError("invalid text encoder options");
  }
  embedding_ = register_module("embedding", torch::nn::Embedding(options.vocab_size, options.dim));
  position_ = register_module("position", torch::nn::Embedding(options.max_length, options.dim));
  layers_ = register_module("layers", torch::nn::ModuleList());
  for (std::int64_t i = 0; i < options.layers; ++i) {
    layers_->push_back(TransformerLayer(options.dim, options.heads, options.ff_dim));
  }
  final_norm_ = register_module("final_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({options.dim})));
  torch::NoGradGuard no_grad;
  embedding_->weight.normal_(0.0, 0.5);
  position_->weight.normal_(0.0, 0.1);
}

LanguageFeatures TextEncoderImpl::forward(const torch::Tensor& ids, const torch::Tensor& valid_lengths) {
  if (ids.dim() != 2 || ids.size(1) != options_.max_length) {
    throw ConfigError("token sequence length must equal the encoder's max_length (" +
                      std::to_string(options_.max_length) + ")");
  }
  if (valid_lengths.dim() != 1 || valid_lengths.size(0) != ids.size(0)) {
    throw ShapeError("valid_lengths must be [B]");
  }
  if (ids.numel() > 0 && (ids.min().item<int64_t>() < 0 || ids.max().item<int64_t>() >= options_.vocab_size)) {
    throw ConfigError("token id outside the encoder vocabulary");
  }
  const auto valid = valid_mask(valid_lengths, options_.max_length);
  auto positions = torch::arange(options_.max_length, ids.options().dtype(torch::kInt64));
  auto x = embedding_(ids) + position_(positions).unsqueeze(0);
  for (const auto& layer : *layers_) {
    x = layer->as<TransformerLayer>()->forward(x, valid);
  }
  x = final_norm_(x);
  return {x.transpose(1, 2), valid};
}

}  // namespace mdsm
