#include "mdsm/pipeline.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "mdsm/errors.hpp"

namespace mdsm {
using nlohmann::json;

IntermediateModelImpl::IntermediateModelImpl(const ModelConfig& config, std::int64_t vocab_size) : config_(config) {
  TextEncoderOptions text;
  text.vocab_size = vocab_size;
  text.dim = config.text_dim;
  text.layers = config.text_layers;
  text.heads = config.text_heads;
  text.max_length = config.max_tokens;
  text.ff_dim = 2 * config.text_dim;
  text_encoder = register_module("text_encoder", TextEncoder(text));

  EncoderOptions enc;
  enc.image_size = config.image_size;
  enc.c1 = config.c1;
  enc.blocks = config.blocks;
  enc.c_clp = config.c_clp;
  enc.lang_dim = config.text_dim;
  enc.use_global_branch = config.use_global_branch;
  encoder = register_module("encoder", MultimodalEncoder(enc));

  std::vector<std::int64_t> pyramid;
  for (std::int64_t i = 0; i < config.blocks; ++i) pyramid.push_back(enc.channels(i));
  decoder = register_module("decoder", TopDownDecoder(pyramid, kDecoderWidth));
  head = register_module("head", SegmentationHead(kDecoderWidth));

  if (!config.train_text_encoder) {
    for (auto& p : text_encoder->parameters()) p.set_requires_grad(false);
  }
}

Stage1Output IntermediateModelImpl::forward(const torch::Tensor& images, const torch::Tensor& tokens,
                                            const torch::Tensor& valid_lengths) {
  if (images.dim() != 4 || images.size(2) != config_.image_size || images.size(3) != config_.image_size) {
    throw ShapeError("stage 1 expects images [B, 3, " + std::to_string(config_.image_size) + ", " +
                     std::to_string(config_.image_size) + "]");
  }
  Stage1Output out;
  out.language = text_encoder->forward(tokens, valid_lengths);
  out.pyramid = encoder->forward(images, out.language);
  out.stack = decoder->forward(out.pyramid.multimodal);
  out.probability = head->forward(out.stack, images.size(2), images.size(3));
  return out;
}

std::vector<std::int64_t> IntermediateModelImpl::stack_channels() const {
  std::vector<std::int64_t> widths;
  for (std::int64_t j = 0; j < config_.blocks; ++j) widths.push_back(decoder->level_channels(static_cast<std::size_t>(j)));
  return widths;
}

RefinerImpl::RefinerImpl(const std::vector<std::int64_t>& stack_channels,
                         const std::vector<std::int64_t>& level_channels, const std::vector<std::int64_t>& selection) {
  fusion = register_module("fusion", LevelFusion(stack_channels, level_channels, selection));
  head = register_module("head", RefinementHead(fusion->output_channels()));
}

ProbabilityMap RefinerImpl::forward(const std::vector<torch::Tensor>& estimates, const DecodedFeatureStack& stack,
                                    const torch::Tensor& p_it, bool clamp) {
  return head->forward(fusion->forward(estimates, stack).concatenated, p_it, clamp);
}

NoiseSchedule make_schedule(const DiffusionConfig& config) {
  return build_schedule(config.steps, config.beta_start, config.beta_end);
}

DenoiserOptions make_denoiser_options(const DiffusionConfig& config) {
  DenoiserOptions options;
  options.base = config.base_channels;
  options.steps = config.steps;
  return options;
}

Refiner make_refiner(const IntermediateModel& stage1, const Denoiser& denoiser, const DiffusionConfig& config) {
  return Refiner(stage1->stack_channels(), denoiser->options().level_channels, config.level_selection);
}

torch::Tensor fixed_noise(std::int64_t channels, std::int64_t height, std::int64_t width, std::uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::randn({1, channels, height, width}, gen, torch::kFloat32);
}

std::vector<torch::Tensor> denoiser_estimates(Denoiser& denoiser, const torch::Tensor& images,
                                              const DiffusionConfig& config, const NoiseSchedule& schedule) {
  auto eps = fixed_noise(images.size(1), images.size(2), images.size(3), config.noise_seed).expand_as(images);
  auto x_t = forward_noise(images, config.t_infer, schedule, eps.contiguous());
  auto steps = torch::full({images.size(0)}, config.t_infer, torch::kInt64);
  return level_estimates(denoiser->forward(x_t, steps), config.t_infer, schedule, config.level_selection);
}

std::filesystem::path stage_dir(const std::filesystem::path& run_dir, const std::string& stage) {
  return run_dir / stage;
}

void save_checkpoint(const std::filesystem::path& dir, const CheckpointInfo& info, torch::nn::Module& module,
                     torch::optim::Optimizer* optimizer) {
  std::filesystem::create_directories(dir);
  torch::serialize::OutputArchive archive;
  module.save(archive);
  archive.save_to((dir / "weights.pt").string());
  if (optimizer != nullptr) torch::save(*optimizer, (dir / "optimizer.pt").string());

  const json j = {{"stage", info.stage},
                  {"config", json::parse(to_json(info.config))},
                  {"epoch", info.epoch},
                  {"iteration", info.iteration},
                  {"best_metric_name", info.best_metric_name},
                  {"best_metric", info.best_metric},
                  {"vocab_size", info.vocab_size},
                  {"vocab_hash", info.vocab_hash},
                  {"has_optimizer", optimizer != nullptr}};
  std::ofstream out(dir / "checkpoint.json");
  if (!out) throw TrainingError("cannot write " + (dir / "checkpoint.json").string());
  out << j.dump(2) << '\n';
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
  std::ifstream in(dir / "checkpoint.json");
  if (!in) throw TrainingError("no checkpoint in " + dir.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw TrainingError("corrupt checkpoint.json in " + dir.string() + ": " + e.what());
  }
  CheckpointInfo info;
  info.stage = j.at("stage").get<std::string>();
  info.config = run_config_from_json(j.at("config").dump());
  info.epoch = j.at("epoch").get<std::int64_t>();
  info.iteration = j.at("iteration").get<std::int64_t>();
  info.best_metric_name = j.at("best_metric_name").get<std::string>();
  info.best_metric = j.at("best_metric").get<double>();
  info.vocab_size = j.at("vocab_size").get<std::int64_t>();
  info.vocab_hash = j.at("vocab_hash").get<std::uint64_t>();
  return info;
}

void load_weights(const std::filesystem::path& dir, torch::nn::Module& module) {
  const auto path = dir / "weights.pt";
  if (!std::filesystem::exists(path)) throw TrainingError("missing weights " + path.string());
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  module.load(archive);
}

void load_optimizer(const std::filesystem::path& dir, torch::optim::Optimizer& optimizer) {
  const auto path = dir / "optimizer.pt";
  if (!std::filesystem::exists(path)) throw TrainingError("missing optimizer state " + path.string());
  torch::load(optimizer, path.string());
}

ModuleSnapshot snapshot(const torch::nn::Module& module) {
  ModuleSnapshot state;
  for (const auto& item : module.named_parameters()) state.emplace_back(item.key(), item.value().detach().clone());
  for (const auto& item : module.named_buffers()) state.emplace_back(item.key(), item.value().detach().clone());
  return state;
}

void restore(torch::nn::Module& module, const ModuleSnapshot& state) {
  torch::NoGradGuard no_grad;
  auto params = module.named_parameters();
  auto buffers = module.named_buffers();
  for (const auto& [name, value] : state) {
    if (auto* p = params.find(name)) {
      p->copy_(value);
    } else if (auto* b = buffers.find(name)) {
      b->copy_(value);
    } else {
      throw ConfigError("snapshot entry '" + name + "' does not exist in the module");
    }
  }
}

torch::Tensor predict_stage1(IntermediateModel& model, const SplitData& data, std::int64_t batch_size) {
  torch::NoGradGuard no_grad;
  model->eval();
  std::vector<torch::Tensor> parts;
  for (std::int64_t start = 0; start < data.size(); start += batch_size) {
    const auto len = std::min(batch_size, data.size() - start);
    parts.push_back(model
                        ->forward(data.images.narrow(0, start, len), data.tokens.narrow(0, start, len),
                                  data.valid_lengths.narrow(0, start, len))
                        .probability.values);
  }
  if (parts.empty()) return torch::empty({0, 1, data.images.size(2), data.images.size(3)});
  return torch::cat(parts, 0);
}

Pipeline Pipeline::load(const std::filesystem::path& run_dir, bool with_refiner) {
  Pipeline p;
  const auto s1 = stage_dir(run_dir, "stage1");
  const auto info = read_checkpoint_info(s1);
  p.config = info.config;
  p.vocab = Vocabulary::load(s1 / "vocab.txt");
  if (p.vocab.size() != info.vocab_size || p.vocab.hash() != info.vocab_hash) {
    throw TrainingError("stage-1 vocabulary does not match its checkpoint");
  }
  p.stage1 = IntermediateModel(p.config.model, p.vocab.size());
  load_weights(s1, *p.stage1);
  p.stage1->eval();
  p.schedule = make_schedule(p.config.diffusion);
  if (with_refiner) {
    const auto s2 = stage_dir(run_dir, "stage2");
    // Stage 2 records the diffusion settings it was trained with.
    p.config.diffusion = read_checkpoint_info(s2).config.diffusion;
    p.schedule = make_schedule(p.config.diffusion);
    p.denoiser = Denoiser(make_denoiser_options(p.config.diffusion));
    load_weights(stage_dir(run_dir, "ddpm"), *p.denoiser);
    p.denoiser->eval();
    p.refiner = make_refiner(p.stage1, p.denoiser, p.config.diffusion);
    load_weights(s2, *p.refiner);
    p.refiner->eval();
  }
  return p;
}

Predictions Pipeline::predict(const SplitData& data, std::int64_t batch_size) {
  torch::NoGradGuard no_grad;
  stage1->eval();
  Predictions out;
  std::vector<torch::Tensor> it_parts;
  std::vector<torch::Tensor> diff_parts;
  for (std::int64_t start = 0; start < data.size(); start += batch_size) {
    const auto len = std::min(batch_size, data.size() - start);
    auto images = data.images.narrow(0, start, len);
    auto s1 = stage1->forward(images, data.tokens.narrow(0, start, len), data.valid_lengths.narrow(0, start, len));
    it_parts.push_back(s1.probability.values);
    if (has_refiner()) {
      denoiser->eval();
      refiner->eval();
      auto estimates = denoiser_estimates(denoiser, images, config.diffusion, schedule);
      diff_parts.push_back(
          refiner->forward(estimates, s1.stack, s1.probability.values, config.diffusion.clamp_probability).values);
    }
  }
  const auto h = data.images.size(2);
  const auto w = data.images.size(3);
  out.p_it = it_parts.empty() ? torch::empty({0, 1, h, w}) : torch::cat(it_parts, 0);
  if (has_refiner()) out.p_diff = diff_parts.empty() ? torch::empty({0, 1, h, w}) : torch::cat(diff_parts, 0);
  return out;
}

InferResult Pipeline::infer(const torch::Tensor& image, const std::string& instruction) {
  if (image.dim() != 3 || image.size(0) != 3) throw ShapeError("image must be [3, H, W]");
  const auto l = config.model.max_tokens;
  const auto words = split_words(instruction);
  const auto seq = tokenize(instruction, vocab, l);
  if (seq.valid_length == 0) throw InvalidInputError("instruction has no words");

  SplitData one;
  one.ids = {"input"};
  one.instructions = {instruction};
  one.images = image.unsqueeze(0).to(torch::kFloat32);
  one.masks = torch::zeros({1, image.size(1), image.size(2)}, torch::kUInt8);
  one.tokens = torch::tensor(seq.ids, torch::kInt64).view({1, l});
  one.valid_lengths = torch::tensor({seq.valid_length}, torch::kInt64);

  const auto pred = predict(one, 1);
  InferResult result;
  result.truncated = static_cast<std::int64_t>(words.size()) > l;
  result.p_it = pred.p_it[0];
  result.mask_it = binarize(pred.p_it)[0][0];
  if (has_refiner()) {
    result.p_diff = pred.p_diff[0];
    result.mask_diff = binarize(pred.p_diff)[0][0];
  }
  return result;
}

}  // namespace mdsm
