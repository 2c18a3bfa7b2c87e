#pragma once

// Hierarchical crossmodal encoder: a parallel local/global image encoder for
// block 1, pixel-word attention (PWAM) in every block, and a tanh language gate
// that feeds E_i = F_i * S_i + V_i into the next block.

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "mdsm/text_encoder.hpp"

namespace mdsm {

struct EncoderOptions {
  std::int64_t image_size = 64;
  std::int64_t c1 = 32;       // channels of block 1; doubled per block
  std::int64_t blocks = 4;    // M
  std::int64_t c_clp = 512;   // global embedding width
  std::int64_t lang_dim = 64; // C of the language features
  bool use_global_branch = true;

  /// Spatial side of block 1 (image_size / 4).
  std::int64_t block1_size() const { return image_size / 4; }
  std::int64_t channels(std::int64_t block_index) const { return c1 << block_index; }
};

/// sqrt(c_clp / c1); throws ConfigError unless it is a positive integer.
std::int64_t global_map_side(std::int64_t c_clp, std::int64_t c1);

/// Largest group count <= 8 dividing `channels`.
std::int64_t group_count(std::int64_t channels);

class ConvNormActImpl : public torch::nn::Module {
 public:
  ConvNormActImpl(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::GroupNorm norm_{nullptr};
};
TORCH_MODULE(ConvNormAct);

/// Local branch, first stage: x0 [B,3,H,W] -> V_sw [B, c1, H/4, W/4].
class LocalStemImpl : public torch::nn::Module {
 public:
  explicit LocalStemImpl(std::int64_t c1);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_;
};
TORCH_MODULE(LocalStem);

/// Global branch: pooled image embedding of width c_clp.
class GlobalBranchImpl : public torch::nn::Module {
 public:
  GlobalBranchImpl(std::int64_t c_clp, std::int64_t c1);
  /// [B, c_clp]
  torch::Tensor embed(const torch::Tensor& x);
  /// Embedding reshaped to [B, c1, s, s] with s = sqrt(c_clp / c1).
  torch::Tensor forward(const torch::Tensor& x);

 private:
  std::int64_t c1_;
  std::int64_t side_;
  torch::nn::Sequential body_;
  torch::nn::Linear project_{nullptr};
};
TORCH_MODULE(GlobalBranch);

/// Block-1 image encoder. With the global branch, its map is bilinearly resized to
/// the local grid, concatenated on channels and fused by a 3x3 conv; without it the
/// 3x3 conv sees the local features alone.
class ParallelImageEncoderImpl : public torch::nn::Module {
 public:
  explicit ParallelImageEncoderImpl(const EncoderOptions& options);
  torch::Tensor forward(const torch::Tensor& x0);
  bool uses_global_branch() const { return !global_.is_empty(); }

 private:
  LocalStem local_{nullptr};
  GlobalBranch global_{nullptr};
  torch::nn::Conv2d fuse_{nullptr};
};
TORCH_MODULE(ParallelImageEncoder);

/// Pixel-word attention. All projections are 1x1 convolutions.
///   G' = softmax(C^-1/2 flatten(q(V)) k(L)^T) v(L)
///   G  = w(unflatten(G'^T))
///   F  = f(m(V) * G)
class PwamImpl : public torch::nn::Module {
 public:
  PwamImpl(std::int64_t vis_channels, std::int64_t lang_dim);

  /// V [B,C,H,W] -> F [B,C,H,W]. Throws InvalidInputError if a row has no valid token.
  torch::Tensor forward(const torch::Tensor& visual, const LanguageFeatures& language);
  /// Softmax weights [B, H*W, l]; padded tokens get exactly zero.
  torch::Tensor attention(const torch::Tensor& visual, const LanguageFeatures& language);
  /// G' as [B, H*W, C].
  torch::Tensor attended_values(const torch::Tensor& visual, const LanguageFeatures& language);

  torch::nn::Conv2d query{nullptr};
  torch::nn::Conv1d key{nullptr};
  torch::nn::Conv1d value{nullptr};
  torch::nn::Conv2d out_w{nullptr};
  torch::nn::Conv2d out_m{nullptr};
  torch::nn::Conv2d out_f{nullptr};

 private:
  std::int64_t channels_;
};
TORCH_MODULE(Pwam);

struct GateOutput {
  torch::Tensor gated;  // E = F * S + V
  torch::Tensor gate;   // S = tanh(conv1x1(F))
};

class LanguageGateImpl : public torch::nn::Module {
 public:
  explicit LanguageGateImpl(std::int64_t channels);
  GateOutput forward(const torch::Tensor& multimodal, const torch::Tensor& visual);

  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(LanguageGate);

/// Blocks 2..M of the local branch: stride-2 conv with channel doubling.
class EncoderStageImpl : public torch::nn::Module {
 public:
  EncoderStageImpl(std::int64_t in, std::int64_t out);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  ConvNormAct down_{nullptr};
  ConvNormAct refine_{nullptr};
};
TORCH_MODULE(EncoderStage);

struct FeaturePyramid {
  std::vector<torch::Tensor> visual;      // V_i
  std::vector<torch::Tensor> multimodal;  // F_i
  std::vector<torch::Tensor> gated;       // E_i
  std::vector<torch::Tensor> gates;       // S_i

  std::size_t size() const { return visual.size(); }
};

class MultimodalEncoderImpl : public torch::nn::Module {
 public:
  explicit MultimodalEncoderImpl(const EncoderOptions& options);
  FeaturePyramid forward(const torch::Tensor& x0, const LanguageFeatures& language);

  const EncoderOptions& options() const { return options_; }
  Pwam pwam(std::size_t block) const { return Pwam(pwams_->ptr<PwamImpl>(block)); }
  LanguageGate gate(std::size_t block) const { return LanguageGate(gates_->ptr<LanguageGateImpl>(block)); }

 private:
  EncoderOptions options_;
  ParallelImageEncoder image_encoder_{nullptr};
  torch::nn::ModuleList stages_;
  torch::nn::ModuleList pwams_;
  torch::nn::ModuleList gates_;
};
TORCH_MODULE(MultimodalEncoder);

}  // namespace mdsm
