#pragma once

// Instruction encoder: token ids -> per-token feature matrix [B, C, l] with a padding mask.

#include <cstdint>

#include <torch/torch.h>

#include "mdsm/vocabulary.hpp"

namespace mdsm {

struct LanguageFeatures {
  torch::Tensor features;  // [B, C, l]
  torch::Tensor valid;     // [B, l] bool, false at padding positions
};

/// [B] lengths -> [B, l] bool mask, true for positions < length.
torch::Tensor valid_mask(const torch::Tensor& valid_lengths, std::int64_t max_length);

struct TextEncoderOptions {
  std::int64_t vocab_size = 2;
  std::int64_t dim = 64;
  std::int64_t layers = 2;
  std::int64_t heads = 4;
  std::int64_t max_length = 20;
  std::int64_t ff_dim = 128;
};

/// Multi-head self attention; keys at padding positions get zero weight.
class SelfAttentionImpl : public torch::nn::Module {
 public:
  SelfAttentionImpl(std::int64_t dim, std::int64_t heads);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& valid);

 private:
  std::int64_t heads_;
  torch::nn::Linear qkv_{nullptr};
  torch::nn::Linear out_{nullptr};
};
TORCH_MODULE(SelfAttention);

/// Pre-norm transformer block.
class TransformerLayerImpl : public torch::nn::Module {
 public:
  TransformerLayerImpl(std::int64_t dim, std::int64_t heads, std::int64_t ff_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& valid);

 private:
  torch::nn::LayerNorm norm1_{nullptr};
  SelfAttention attn_{nullptr};
  torch::nn::LayerNorm norm2_{nullptr};
  torch::nn::Linear ff1_{nullptr};
  torch::nn::Linear ff2_{nullptr};
};
TORCH_MODULE(TransformerLayer);

class TextEncoderImpl : public torch::nn::Module {
 public:
  explicit TextEncoderImpl(const TextEncoderOptions& options);

  /// `ids` [B, l] with l == options.max_length, `valid_lengths` [B].
  LanguageFeatures forward(const torch::Tensor& ids, const torch::Tensor& valid_lengths);

  const TextEncoderOptions& options() const { return options_; }
  torch::nn::Embedding& embedding() { return embedding_; }

 private:
  TextEncoderOptions options_;
  torch::nn::Embedding embedding_{nullptr};
  torch::nn::Embedding position_{nullptr};
  torch::nn::ModuleList layers_;
  torch::nn::LayerNorm final_norm_{nullptr};
};
TORCH_MODULE(TextEncoder);

}  // namespace mdsm
