#include "mdsm/multimodal_encoder.hpp"

#include <cmath>
#include <limits>

#include "mdsm/errors.hpp"

namespace mdsm {

namespace F = torch::nn::functional;

namespace {

torch::nn::Conv2d conv1x1(std::int64_t in, std::int64_t out) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1));
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    throw ShapeError(std::string(what) + ": shape mismatch");
  }
}

}  // namespace

std::int64_t global_map_side(std::int64_t c_clp, std::int64_t c1) {
  if (c_clp <= 0 || c1 <= 0 || c_clp % c1 != 0) {
    throw ConfigError("c_clp must be a positive multiple of c1");
  }
  const std::int64_t ratio = c_clp / c1;
  const auto side = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(ratio))));
  if (side * side != ratio) {
    throw ConfigError("sqrt(c_clp / c1) = sqrt(" + std::to_string(ratio) + ") is not an integer");
  }
  return side;
}

std::int64_t group_count(std::int64_t channels) {
  for (std::int64_t g = 8; g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

ConvNormActImpl::ConvNormActImpl(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride) {
  conv_ = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel)
                                                        .stride(stride)
                                                        .padding(kernel / 2)));
  norm_ = register_module("norm", torch::nn::GroupNorm(group_count(out), out));
}

torch::Tensor ConvNormActImpl::forward(const torch::Tensor& x) { return F::gelu(norm_(conv_(x))); }

LocalStemImpl::LocalStemImpl(std::int64_t c1) {
  const std::int64_t mid = std::max<std::int64_t>(c1 / 2, 1);
  body_ = register_module("body", torch::nn::Sequential(ConvNormAct(3, mid, 3, 2), ConvNormAct(mid, c1, 3, 2),
                                                          ConvNormAct(c1, c1, 3, 1)));
}

torch::Tensor LocalStemImpl::forward(const torch::Tensor& x) { return body_->forward(x); }

GlobalBranchImpl::GlobalBranchImpl(std::int64_t c_clp, std::int64_t c1) : c1_(c1), side_(global_map_side(c_clp, c1)) {
  body_ = register_module("body", torch::nn::Sequential(ConvNormAct(3, 16, 3, 2), ConvNormAct(16, 32, 3, 2),
                                                          ConvNormAct(32, 64, 3, 2), ConvNormAct(64, 64, 3, 2)));
  project_ = register_module("project", torch::nn::Linear(64, c_clp));
}

torch::Tensor GlobalBranchImpl::embed(const torch::Tensor& x) {
  auto pooled = body_->forward(x).mean({2, 3});
  return project_(pooled);
}

torch::Tensor GlobalBranchImpl::forward(const torch::Tensor& x) {
  return embed(x).view({x.size(0), c1_, side_, side_});
}

ParallelImageEncoderImpl::ParallelImageEncoderImpl(const EncoderOptions& options) {
  local_ = register_module("local_stem", LocalStem(options.c1));
  std::int64_t fuse_in = options.c1;
  if (options.use_global_branch) {
    global_ = register_module("global_branch", GlobalBranch(options.c_clp, options.c1));
    fuse_in += options.c1;
  }
  fuse_ = register_module("fuse", torch::nn::Conv2d(torch::nn::Conv2dOptions(fuse_in, options.c1, 3).padding(1)));
}

torch::Tensor ParallelImageEncoderImpl::forward(const torch::Tensor& x0) {
  auto local = local_(x0);
  if (global_.is_empty()) {
    return fuse_(local);
  }
  auto global = F::interpolate(global_(x0), F::InterpolateFuncOptions()
                                                .size(std::vector<int64_t>{local.size(2), local.size(3)})
                                                .mode(torch::kBilinear)
                                                .align_corners(false));
  return fuse_(torch::cat({local, global}, 1));
}

PwamImpl::PwamImpl(std::int64_t vis_channels, std::int64_t lang_dim) : channels_(vis_channels) {
  query = register_module("query", conv1x1(vis_channels, vis_channels));
  key = register_module("key", torch::nn::Conv1d(torch::nn::Conv1dOptions(lang_dim, vis_channels, 1)));
  value = register_module("value", torch::nn::Conv1d(torch::nn::Conv1dOptions(lang_dim, vis_channels, 1)));
  out_w = register_module("out_w", conv1x1(vis_channels, vis_channels));
  out_m = register_module("out_m", conv1x1(vis_channels, vis_channels));
  out_f = register_module("out_f", conv1x1(vis_channels, vis_channels));
}

torch::Tensor PwamImpl::attention(const torch::Tensor& visual, const LanguageFeatures& language) {
  if (visual.dim() != 4 || visual.size(1) != channels_) {
    throw ShapeError("PWAM expects visual features [B, " + std::to_string(channels_) + ", H, W]");
  }
  if (language.features.size(0) != visual.size(0) || language.valid.sizes() != torch::IntArrayRef{
                                                                                    language.features.size(0),
                                                                                    language.features.size(2)}) {
    throw ShapeError("PWAM language features do not match the visual batch");
  }
  if (language.valid.any(1).logical_not().any().item<bool>()) {
    throw InvalidInputError("instruction has no valid tokens; attention over padding only is undefined");
  }
  const auto b = visual.size(0);
  auto q = query(visual).flatten(2).transpose(1, 2);  // [B, HW, C]
  auto k = key(language.features);                     // [B, C, l]
  auto scores = torch::bmm(q, k) / std::sqrt(static_cast<double>(channels_));
  scores = scores.masked_fill(language.valid.logical_not().view({b, 1, -1}),
                              -std::numeric_limits<double>::infinity());
  return torch::softmax(scores, -1);
}

torch::Tensor PwamImpl::attended_values(const torch::Tensor& visual, const LanguageFeatures& language) {
  auto weights = attention(visual, language);
  auto v = value(language.features).transpose(1, 2);  // [B, l, C]
  return torch::bmm(weights, v);
}

torch::Tensor PwamImpl::forward(const torch::Tensor& visual, const LanguageFeatures& language) {
  auto attended = attended_values(visual, language);  // [B, HW, C]
  auto g = out_w(attended.transpose(1, 2).reshape(visual.sizes()));
  return out_f(out_m(visual) * g);
}

LanguageGateImpl::LanguageGateImpl(std::int64_t channels) {
  conv = register_module("conv", conv1x1(channels, channels));
}

GateOutput LanguageGateImpl::forward(const torch::Tensor& multimodal, const torch::Tensor& visual) {
  check_same_shape(multimodal, visual, "language gate");
  auto gate = torch::tanh(conv(multimodal));
  return {multimodal * gate + visual, gate};
}

EncoderStageImpl::EncoderStageImpl(std::int64_t in, std::int64_t out) {
  down_ = register_module("down", ConvNormAct(in, out, 3, 2));
  refine_ = register_module("refine", ConvNormAct(out, out, 3, 1));
}

torch::Tensor EncoderStageImpl::forward(const torch::Tensor& x) { return refine_(down_(x)); }

MultimodalEncoderImpl::MultimodalEncoderImpl(const EncoderOptions& options) : options_(options) {
  if (options.blocks < 1) throw ConfigError("encoder needs at least one block");
  if (options.image_size % (4 << (options.blocks - 1)) != 0) {
    throw ConfigError("image_size must be divisible by 4 * 2^(M-1)");
  }
  if (options.use_global_branch) (void)global_map_side(options.c_clp, options.c1);

  image_encoder_ = register_module("image_encoder", ParallelImageEncoder(options));
  stages_ = register_module("stages", torch::nn::ModuleList());
  pwams_ = register_module("pwams", torch::nn::ModuleList());
  gates_ = register_module("gates", torch::nn::ModuleList());
  for (std::int64_t i = 0; i < options.blocks; ++i) {
    if (i > 0) stages_->push_back(EncoderStage(options.channels(i - 1), options.channels(i)));
    pwams_->push_back(Pwam(options.channels(i), options.lang_dim));
    gates_->push_back(LanguageGate(options.channels(i)));
  }
}

FeaturePyramid MultimodalEncoderImpl::forward(const torch::Tensor& x0, const LanguageFeatures& language) {
  if (x0.dim() != 4 || x0.size(1) != 3) {
    throw ShapeError("encoder expects images [B, 3, H, W]");
  }
  FeaturePyramid pyramid;
  torch::Tensor visual = image_encoder_(x0);
  for (std::int64_t i = 0; i < options_.blocks; ++i) {
    if (i > 0) {
      visual = stages_->ptr<EncoderStageImpl>(static_cast<std::size_t>(i - 1))->forward(pyramid.gated.back());
    }
    auto multimodal = pwams_->ptr<PwamImpl>(static_cast<std::size_t>(i))->forward(visual, language);
    auto gated = gates_->ptr<LanguageGateImpl>(static_cast<std::size_t>(i))->forward(multimodal, visual);
    pyramid.visual.push_back(visual);
    pyramid.multimodal.push_back(multimodal);
    pyramid.gated.push_back(gated.gated);
    pyramid.gates.push_back(gated.gate);
  }
  return pyramid;
}

}  // namespace mdsm
