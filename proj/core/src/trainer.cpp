#include "mdsm/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>

#include <json.hpp>

#include "mdsm/errors.hpp"

namespace mdsm {
namespace {

constexpr std::uint64_t kShuffleSalt = 0x5eed0001;
constexpr std::uint64_t kDenoiserSalt = 0x5eed0002;
constexpr std::uint64_t kRefinerSalt = 0x5eed0003;

double mean_iou(IntermediateModel& model, const SplitData& data) {
  return evaluate(binarize(predict_stage1(model, data)), data.masks).miou;
}

void require_finite(double value, const std::string& where) {
  if (!std::isfinite(value)) throw TrainingError(where + ": loss became non-finite");
}

}  // namespace

EarlyStopping::EarlyStopping(std::int64_t patience)
    : patience_(patience), best_loss_(std::numeric_limits<double>::infinity()) {
  if (patience < 1) throw ConfigError("patience must be >= 1");
}

void EarlyStopping::baseline(double loss) {
  best_loss_ = loss;
  best_iteration_ = 0;
}

EarlyStopping::Decision EarlyStopping::update(double loss, bool warmup) {
  ++iteration_;
  Decision d;
  if (loss < best_loss_) {
    best_loss_ = loss;
    best_iteration_ = iteration_;
    stale_ = 0;
    d.improved = true;
  } else if (!warmup) {
    ++stale_;
  }
  d.stop = !warmup && stale_ >= patience_;
  return d;
}

Stage1Result train_stage1(IntermediateModel& model, const SplitData& train, const SplitData* val,
                          const RunConfig& config) {
  const auto& opt = config.stage1;
  if (train.size() == 0 && opt.epochs > 0) throw TrainingError("stage 1 needs training samples");
  std::vector<torch::Tensor> params;
  for (auto& p : model->parameters()) {
    if (p.requires_grad()) params.push_back(p);
  }
  Stage1Result result;
  result.optimizer = std::make_shared<torch::optim::AdamW>(
      params, torch::optim::AdamWOptions(opt.learning_rate)
                  .betas({opt.beta1, opt.beta2})
                  .weight_decay(opt.weight_decay));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(config.seed ^ kShuffleSalt);

  std::optional<ModuleSnapshot> best;
  result.best_val_miou = -1.0;
  const auto n = train.size();
  for (std::int64_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    model->train();
    auto order = torch::randperm(n, gen, torch::kInt64);
    double total = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t start = 0; start < n; start += opt.batch_size) {
      auto idx = order.narrow(0, start, std::min(opt.batch_size, n - start));
      auto out = model->forward(train.images.index_select(0, idx), train.tokens.index_select(0, idx),
                                train.valid_lengths.index_select(0, idx));
      auto target = train.masks.index_select(0, idx).unsqueeze(1).to(torch::kFloat32);
      auto loss = intermediate_loss(out.probability.values, target);
      const double value = loss.item<double>();
      require_finite(value, "stage 1 epoch " + std::to_string(epoch));
      result.optimizer->zero_grad();
      loss.backward();
      result.optimizer->step();
      total += value;
      ++batches;
      ++result.steps;
    }
    result.epoch_losses.push_back(total / static_cast<double>(std::max<std::int64_t>(batches, 1)));
    result.epochs_run = epoch;
    std::string line = "[stage1] epoch " + std::to_string(epoch) + "/" + std::to_string(opt.epochs) + " loss " +
                       std::to_string(result.epoch_losses.back());
    if (val != nullptr && val->size() > 0) {
      const double miou = mean_iou(model, *val);
      result.val_mious.push_back(miou);
      line += " val_miou " + std::to_string(miou);
      if (miou > result.best_val_miou) {
        result.best_val_miou = miou;
        result.best_epoch = epoch;
        best = snapshot(*model);
      }
    }
    if (config.verbose) std::cerr << line << '\n';
  }
  if (best) {
    restore(*model, *best);
  } else {
    result.best_epoch = result.epochs_run;
    if (val != nullptr && val->size() > 0) result.best_val_miou = mean_iou(model, *val);
  }
  model->eval();
  return result;
}

Stage2Cache Stage2Cache::select(const torch::Tensor& index) const {
  Stage2Cache out;
  for (const auto& e : estimates) out.estimates.push_back(e.index_select(0, index));
  for (const auto& s : stack) out.stack.push_back(s.index_select(0, index));
  out.p_it = p_it.index_select(0, index);
  out.targets = targets.index_select(0, index);
  return out;
}

Stage2Cache build_stage2_cache(IntermediateModel& stage1, Denoiser& denoiser, const SplitData& data,
                               const DiffusionConfig& config, const NoiseSchedule& schedule,
                               std::int64_t batch_size) {
  torch::NoGradGuard no_grad;
  stage1->eval();
  denoiser->eval();
  std::vector<std::vector<torch::Tensor>> estimates(config.level_selection.size());
  std::vector<std::vector<torch::Tensor>> stack;
  std::vector<torch::Tensor> p_it;
  for (std::int64_t start = 0; start < data.size(); start += batch_size) {
    const auto len = std::min(batch_size, data.size() - start);
    auto images = data.images.narrow(0, start, len);
    auto s1 = stage1->forward(images, data.tokens.narrow(0, start, len), data.valid_lengths.narrow(0, start, len));
    auto est = denoiser_estimates(denoiser, images, config, schedule);
    for (std::size_t k = 0; k < est.size(); ++k) estimates[k].push_back(est[k]);
    if (stack.empty()) stack.resize(s1.stack.size());
    for (std::size_t j = 0; j < s1.stack.size(); ++j) stack[j].push_back(s1.stack.levels[j]);
    p_it.push_back(s1.probability.values);
  }
  if (p_it.empty()) throw TrainingError("stage 2 needs at least one sample");
  Stage2Cache cache;
  for (auto& parts : estimates) cache.estimates.push_back(torch::cat(parts, 0));
  for (auto& parts : stack) cache.stack.push_back(torch::cat(parts, 0));
  cache.p_it = torch::cat(p_it, 0);
  cache.targets = data.masks.unsqueeze(1).to(torch::kFloat32);
  return cache;
}

std::pair<SplitData, SplitData> holdout_split(const SplitData& data, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("holdout fraction must lie in (0, 1)");
  const auto n = data.size();
  const auto held = static_cast<std::int64_t>(std::ceil(fraction * static_cast<double>(n)));
  if (n < 2 || held >= n) throw ConfigError("need at least one training and one holdout sample");
  return {data.select(torch::arange(0, n - held, torch::kInt64)),
          data.select(torch::arange(n - held, n, torch::kInt64))};
}

torch::Tensor refine(Refiner& refiner, const Stage2Cache& cache, bool clamp) {
  torch::NoGradGuard no_grad;
  refiner->eval();
  return refiner->forward(cache.estimates, cache.decoded(), cache.p_it, clamp).values;
}

double refiner_loss(Refiner& refiner, const Stage2Cache& cache, bool clamp) {
  return diffusion_loss(refine(refiner, cache, clamp), cache.targets).item<double>();
}

Stage2Result train_stage2(Refiner& refiner, const Stage2Cache& train, const Stage2Cache& holdout,
                          const RunConfig& config) {
  const auto& opt = config.stage2.optimizer;
  const bool clamp = config.diffusion.clamp_probability;
  Stage2Result result;
  result.optimizer = std::make_shared<torch::optim::Adam>(
      refiner->parameters(), torch::optim::AdamOptions(opt.learning_rate)
                                 .betas({opt.beta1, opt.beta2})
                                 .weight_decay(opt.weight_decay));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(config.seed ^ kRefinerSalt);

  EarlyStopping stopper(config.stage2.patience);
  result.initial_holdout_loss = refiner_loss(refiner, holdout, clamp);
  stopper.baseline(result.initial_holdout_loss);
  ModuleSnapshot best = snapshot(*refiner);

  const auto n = train.size();
  for (std::int64_t epoch = 0; epoch < opt.epochs && !result.stopped_early; ++epoch) {
    const bool warmup = epoch < config.stage2.warmup_epochs;
    auto order = torch::randperm(n, gen, torch::kInt64);
    for (std::int64_t start = 0; start < n; start += opt.batch_size) {
      auto batch = train.select(order.narrow(0, start, std::min(opt.batch_size, n - start)));
      refiner->train();
      auto p = refiner->forward(batch.estimates, batch.decoded(), batch.p_it, clamp).values;
      auto loss = diffusion_loss(p, batch.targets);
      require_finite(loss.item<double>(), "stage 2 epoch " + std::to_string(epoch + 1));
      result.optimizer->zero_grad();
      loss.backward();
      result.optimizer->step();
      ++result.iterations;

      const double held = refiner_loss(refiner, holdout, clamp);
      require_finite(held, "stage 2 holdout");
      result.holdout_losses.push_back(held);
      const auto decision = stopper.update(held, warmup);
      if (decision.improved) best = snapshot(*refiner);
      if (decision.stop) {
        result.stopped_early = true;
        break;
      }
    }
    if (config.verbose) {
      std::cerr << "[stage2] epoch " << epoch + 1 << "/" << opt.epochs << " holdout_mae "
                << result.holdout_losses.back() << " best " << stopper.best_loss() << " @ "
                << stopper.best_iteration() << '\n';
    }
  }
  restore(*refiner, best);
  refiner->eval();
  result.best_iteration = stopper.best_iteration();
  result.best_holdout_loss = stopper.best_loss();
  return result;
}

Stage1Result run_stage1(const RunConfig& config) {
  validate(config);
  const std::filesystem::path data_dir = config.data_dir;
  const std::filesystem::path run_dir = config.run_dir;
  if (run_dir.empty()) throw ConfigError("run_dir is required");
  const auto vocab = load_vocabulary(data_dir);
  const auto train = load_split(data_dir, "train", vocab, config.model.max_tokens, config.train_limit);
  const auto val = load_split(data_dir, "val", vocab, config.model.max_tokens);

  torch::manual_seed(config.seed);
  IntermediateModel model(config.model, vocab.size());
  auto result = train_stage1(model, train, &val, config);

  std::filesystem::create_directories(run_dir);
  save_run_config(run_dir / "config.json", config);
  CheckpointInfo info;
  info.stage = "stage1";
  info.config = config;
  info.epoch = result.epochs_run;
  info.iteration = result.steps;
  info.best_metric_name = "val_miou";
  info.best_metric = result.best_val_miou;
  info.vocab_size = vocab.size();
  info.vocab_hash = vocab.hash();
  const auto dir = stage_dir(run_dir, "stage1");
  save_checkpoint(dir, info, *model, result.optimizer.get());
  vocab.save(dir / "vocab.txt");
  return result;
}

DenoiserTrainStats run_ddpm(const RunConfig& config) {
  validate(config);
  const std::filesystem::path data_dir = config.data_dir;
  const std::filesystem::path run_dir = config.run_dir;
  if (run_dir.empty()) throw ConfigError("run_dir is required");
  const auto vocab = load_vocabulary(data_dir);
  const auto train = load_split(data_dir, "train", vocab, config.model.max_tokens, config.train_limit);

  torch::manual_seed(config.seed ^ kDenoiserSalt);
  Denoiser denoiser(make_denoiser_options(config.diffusion));
  DenoiserTrainOptions options;
  options.epochs = config.diffusion.optimizer.epochs;
  options.batch_size = config.diffusion.optimizer.batch_size;
  options.learning_rate = config.diffusion.optimizer.learning_rate;
  options.seed = config.seed ^ kDenoiserSalt;
  options.verbose = config.verbose;
  auto stats = train_denoiser(denoiser, train.images, make_schedule(config.diffusion), options);

  CheckpointInfo info;
  info.stage = "ddpm";
  info.config = config;
  info.epoch = options.epochs;
  info.iteration = stats.steps;
  info.best_metric_name = "train_mse";
  info.best_metric = stats.final_epoch_loss;
  info.vocab_size = vocab.size();
  info.vocab_hash = vocab.hash();
  save_checkpoint(stage_dir(run_dir, "ddpm"), info, *denoiser);
  return stats;
}

Stage2Result run_stage2(const RunConfig& requested) {
  RunConfig config = requested;
  validate(config);
  const std::filesystem::path data_dir = config.data_dir;
  const std::filesystem::path run_dir = config.run_dir;
  if (run_dir.empty()) throw ConfigError("run_dir is required");

  // The denoiser architecture and schedule come from its own checkpoint.
  const auto ddpm_info = read_checkpoint_info(stage_dir(run_dir, "ddpm"));
  config.diffusion.steps = ddpm_info.config.diffusion.steps;
  config.diffusion.beta_start = ddpm_info.config.diffusion.beta_start;
  config.diffusion.beta_end = ddpm_info.config.diffusion.beta_end;
  config.diffusion.base_channels = ddpm_info.config.diffusion.base_channels;
  validate(config);

  auto pipeline = Pipeline::load(run_dir, false);
  config.model = pipeline.config.model;
  const auto schedule = make_schedule(config.diffusion);
  Denoiser denoiser(make_denoiser_options(config.diffusion));
  load_weights(stage_dir(run_dir, "ddpm"), *denoiser);

  const auto val = load_split(data_dir, "val", pipeline.vocab, pipeline.config.model.max_tokens);
  const auto [fit, held] = holdout_split(val, config.stage2.holdout_fraction);
  const auto fit_cache = build_stage2_cache(pipeline.stage1, denoiser, fit, config.diffusion, schedule);
  const auto held_cache = build_stage2_cache(pipeline.stage1, denoiser, held, config.diffusion, schedule);

  torch::manual_seed(config.seed ^ kRefinerSalt);
  auto refiner = make_refiner(pipeline.stage1, denoiser, config.diffusion);
  auto result = train_stage2(refiner, fit_cache, held_cache, config);

  CheckpointInfo info;
  info.stage = "stage2";
  info.config = config;
  info.epoch = config.stage2.optimizer.epochs;
  info.iteration = result.iterations;
  info.best_metric_name = "holdout_mae";
  info.best_metric = result.best_holdout_loss;
  info.vocab_size = pipeline.vocab.size();
  info.vocab_hash = pipeline.vocab.hash();
  save_checkpoint(stage_dir(run_dir, "stage2"), info, *refiner, result.optimizer.get());
  return result;
}

EvalOutcome run_eval(const std::filesystem::path& run_dir, const std::filesystem::path& data_dir,
                     const std::string& split, bool with_refiner, const std::filesystem::path& out_dir) {
  auto pipeline = Pipeline::load(run_dir, with_refiner);
  const auto data = load_split(data_dir, split, pipeline.vocab, pipeline.config.model.max_tokens);
  if (data.size() == 0) throw InvalidInputError("split '" + split + "' is empty");
  const auto pred = pipeline.predict(data);

  EvalOutcome outcome;
  outcome.ids = data.ids;
  outcome.stage1 = evaluate(binarize(pred.p_it), data.masks);
  if (pipeline.has_refiner()) outcome.stage2 = evaluate(binarize(pred.p_diff), data.masks);

  std::filesystem::create_directories(out_dir);
  auto summary_json = [](const EvalResult& r) {
    nlohmann::json precision;
    for (std::size_t k = 0; k < kPrecisionThresholds.size(); ++k) {
      precision["P@" + std::to_string(static_cast<int>(std::lround(kPrecisionThresholds[k] * 10))) + "0"] =
          r.precision[k];
    }
    return nlohmann::json{{"miou", r.miou}, {"oiou", r.oiou}, {"precision", precision}, {"count", r.size()}};
  };
  nlohmann::json summary = {{"split", split}, {"stage1", summary_json(outcome.stage1)}};
  write_iou_table(out_dir / "iou_stage1.csv", data.ids, outcome.stage1.ious);
  write_iou_histogram(out_dir / "histogram_stage1.pgm", outcome.stage1.ious);
  if (outcome.stage2) {
    summary["stage2"] = summary_json(*outcome.stage2);
    write_iou_table(out_dir / "iou_stage2.csv", data.ids, outcome.stage2->ious);
    write_iou_histogram(out_dir / "histogram_stage2.pgm", outcome.stage2->ious);
  }
  std::ofstream(out_dir / "summary.json") << summary.dump(2) << '\n';
  return outcome;
}

}  // namespace mdsm
