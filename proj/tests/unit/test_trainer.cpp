#include <cmath>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "mdsm/dataset_io.hpp"
#include "mdsm/errors.hpp"
#include "mdsm/pipeline.hpp"
#include "mdsm/run_config.hpp"
#include "mdsm/trainer.hpp"

namespace mdsm {
namespace {

namespace fs = std::filesystem;

bool same_state(const torch::nn::Module& a, const torch::nn::Module& b) {
  const auto sa = snapshot(a);
  const auto sb = snapshot(b);
  if (sa.size() != sb.size()) return false;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (sa[i].first != sb[i].first || !torch::equal(sa[i].second, sb[i].second)) return false;
  }
  return true;
}

RunConfig tiny_config(const fs::path& data, const fs::path& run) {
  RunConfig c;
  c.seed = 11;
  c.data_dir = data.string();
  c.run_dir = run.string();
  c.model.c1 = 8;
  c.model.text_dim = 16;
  c.model.text_heads = 2;
  c.model.text_layers = 1;
  c.model.max_tokens = 12;
  c.stage1 = {2, 4, 1e-3, 0.9, 0.99, 0.01};
  c.stage2.optimizer.epochs = 2;
  c.stage2.warmup_epochs = 1;
  c.diffusion.steps = 20;
  c.diffusion.t_infer = 10;
  c.diffusion.base_channels = 8;
  c.diffusion.optimizer = {1, 4, 2e-3, 0.9, 0.999, 0.0};
  return c;
}

// One small dataset and trained run directory shared by the slower tests.
class TinyRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("mdsm_unit_trainer_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    DatagenConfig gen;
    gen.sizes = {12, 10, 6};
    gen.seed = 5;
    write_dataset(root_ / "data", generate_dataset(gen));
    config_ = tiny_config(root_ / "data", root_ / "run");
    run_stage1(config_);
    run_ddpm(config_);
    run_stage2(config_);
  }

  static void TearDownTestSuite() { fs::remove_all(root_); }

  SplitData split(const std::string& name) {
    const auto vocab = load_vocabulary(root_ / "data");
    return load_split(root_ / "data", name, vocab, config_.model.max_tokens);
  }

  static fs::path root_;
  static RunConfig config_;
};

fs::path TinyRun::root_;
RunConfig TinyRun::config_;

TEST(RunConfigJson, RoundTrip) {
  RunConfig c;
  c.seed = 99;
  c.data_dir = "d";
  c.model.use_global_branch = false;
  c.stage1.learning_rate = 3.5e-4;
  c.stage2.patience = 7;
  c.diffusion.level_selection = {1, 3};
  c.diffusion.steps = 40;
  c.diffusion.t_infer = 20;
  c.train_limit = 16;
  const auto text = to_json(c);
  const auto back = run_config_from_json(text);
  EXPECT_EQ(to_json(back), text);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_FALSE(back.model.use_global_branch);
  EXPECT_EQ(back.diffusion.level_selection, (std::vector<std::int64_t>{1, 3}));
}

TEST(RunConfigJson, MissingKeysKeepDefaults) {
  const auto c = run_config_from_json("{\"seed\": 3}");
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.stage1.epochs, 11);
  EXPECT_EQ(c.stage2.optimizer.batch_size, 1);
  EXPECT_EQ(c.diffusion.t_infer, 50);
}

TEST(RunConfigJson, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(run_config_from_json("{\"bogus\": 1}"), ConfigError);
  EXPECT_THROW(run_config_from_json("not json"), ConfigError);
  RunConfig c;
  c.diffusion.t_infer = 101;
  EXPECT_THROW(validate(c), ConfigError);
  c = RunConfig{};
  c.stage1.batch_size = 0;
  EXPECT_THROW(validate(c), ConfigError);
  c = RunConfig{};
  c.diffusion.level_selection = {0, 0};
  EXPECT_THROW(validate(c), ConfigError);
  c = RunConfig{};
  c.lr_schedule = "cosine";
  EXPECT_THROW(validate(c), ConfigError);
  EXPECT_NO_THROW(validate(RunConfig{}));
}

TEST(EarlyStoppingTest, StopsExactlyPatienceAfterBest) {
  EarlyStopping es(50);
  es.baseline(1.0);
  EXPECT_TRUE(es.update(0.5, false).improved);
  for (int i = 1; i <= 50; ++i) {
    const auto d = es.update(0.5 + 0.01 * i, false);
    EXPECT_FALSE(d.improved);
    EXPECT_EQ(d.stop, i == 50) << i;
  }
  EXPECT_EQ(es.iteration(), 51);
  EXPECT_EQ(es.best_iteration(), 1);
  EXPECT_DOUBLE_EQ(es.best_loss(), 0.5);
}

TEST(EarlyStoppingTest, BaselineCanStayBest) {
  EarlyStopping es(3);
  es.baseline(0.1);
  EXPECT_FALSE(es.update(0.2, false).stop);
  EXPECT_FALSE(es.update(0.2, false).stop);
  EXPECT_TRUE(es.update(0.2, false).stop);
  EXPECT_EQ(es.best_iteration(), 0);
}

TEST(EarlyStoppingTest, ImprovementResetsCounter) {
  EarlyStopping es(50);
  es.baseline(1.0);
  for (int i = 1; i <= 48; ++i) EXPECT_FALSE(es.update(2.0, false).stop);
  EXPECT_TRUE(es.update(0.9, false).improved);
  EXPECT_EQ(es.stale(), 0);
  for (int i = 1; i < 50; ++i) EXPECT_FALSE(es.update(2.0, false).stop);
  EXPECT_TRUE(es.update(2.0, false).stop);
  EXPECT_EQ(es.best_iteration(), 49);
}

TEST(EarlyStoppingTest, WarmupNeverStopsButTracksBest) {
  EarlyStopping es(5);
  es.baseline(1.0);
  for (int i = 0; i < 200; ++i) EXPECT_FALSE(es.update(1.5, true).stop);
  EXPECT_EQ(es.stale(), 0);
  EXPECT_TRUE(es.update(0.4, true).improved);
  EXPECT_EQ(es.best_iteration(), 201);
  for (int i = 1; i < 5; ++i) EXPECT_FALSE(es.update(1.0, false).stop);
  EXPECT_TRUE(es.update(1.0, false).stop);
}

TEST(EarlyStoppingTest, RejectsBadPatience) {
  EXPECT_THROW(EarlyStopping(0), ConfigError);
}

TEST_F(TinyRun, HoldoutSplitTakesTail) {
  const auto val = split("val");
  const auto [fit, held] = holdout_split(val, 0.2);
  EXPECT_EQ(fit.size(), 8);
  EXPECT_EQ(held.size(), 2);
  EXPECT_EQ(held.ids[0], val.ids[8]);
  EXPECT_TRUE(torch::equal(held.images, val.images.narrow(0, 8, 2)));
  const auto [fit3, held3] = holdout_split(val, 0.25);
  EXPECT_EQ(held3.size(), 3);
  EXPECT_EQ(fit3.size(), 7);
  EXPECT_THROW(holdout_split(val, 1.0), ConfigError);
}

TEST_F(TinyRun, ZeroEpochsKeepsInitialWeights) {
  auto config = config_;
  config.stage1.epochs = 0;
  const auto vocab = load_vocabulary(root_ / "data");
  torch::manual_seed(1);
  IntermediateModel model(config.model, vocab.size());
  torch::manual_seed(1);
  IntermediateModel reference(config.model, vocab.size());
  const auto train = split("train");
  const auto val = split("val");
  const auto result = train_stage1(model, train, &val, config);
  EXPECT_EQ(result.steps, 0);
  EXPECT_EQ(result.best_epoch, 0);
  EXPECT_TRUE(same_state(*model, *reference));
}

TEST_F(TinyRun, SameSeedSameLosses) {
  const auto vocab = load_vocabulary(root_ / "data");
  const auto train = split("train");
  std::vector<double> losses[2];
  for (auto& out : losses) {
    torch::manual_seed(3);
    IntermediateModel model(config_.model, vocab.size());
    out = train_stage1(model, train, nullptr, config_).epoch_losses;
  }
  ASSERT_EQ(losses[0].size(), 2u);
  EXPECT_EQ(losses[0], losses[1]);
}

TEST_F(TinyRun, CheckpointRoundTripIsBitExact) {
  const auto vocab = load_vocabulary(root_ / "data");
  torch::manual_seed(4);
  IntermediateModel model(config_.model, vocab.size());
  auto config = config_;
  config.stage1.epochs = 1;
  auto result = train_stage1(model, split("train"), nullptr, config);
  CheckpointInfo info;
  info.stage = "stage1";
  info.config = config;
  info.epoch = 1;
  info.iteration = result.steps;
  info.best_metric_name = "val_miou";
  info.best_metric = 0.25;
  info.vocab_size = vocab.size();
  info.vocab_hash = vocab.hash();
  const auto dir = root_ / "ckpt";
  save_checkpoint(dir, info, *model, result.optimizer.get());

  torch::manual_seed(5);
  IntermediateModel loaded(config_.model, vocab.size());
  EXPECT_FALSE(same_state(*model, *loaded));
  load_weights(dir, *loaded);
  EXPECT_TRUE(same_state(*model, *loaded));

  const auto back = read_checkpoint_info(dir);
  EXPECT_EQ(back.stage, "stage1");
  EXPECT_EQ(back.iteration, result.steps);
  EXPECT_DOUBLE_EQ(back.best_metric, 0.25);
  EXPECT_EQ(back.vocab_hash, vocab.hash());
  EXPECT_EQ(to_json(back.config), to_json(config));

  std::vector<torch::Tensor> trainable;
  for (const auto& p : loaded->parameters()) {
    if (p.requires_grad()) trainable.push_back(p);
  }
  torch::optim::AdamW optimizer(trainable, torch::optim::AdamWOptions(1.0));
  load_optimizer(dir, optimizer);
  ASSERT_EQ(optimizer.state().size(), result.optimizer->state().size());
  const auto& loaded_params = optimizer.param_groups()[0].params();
  const auto& saved_params = result.optimizer->param_groups()[0].params();
  ASSERT_EQ(loaded_params.size(), saved_params.size());
  for (std::size_t i = 0; i < saved_params.size(); ++i) {
    const auto saved = result.optimizer->state().find(saved_params[i].unsafeGetTensorImpl());
    const auto restored = optimizer.state().find(loaded_params[i].unsafeGetTensorImpl());
    ASSERT_EQ(saved == result.optimizer->state().end(), restored == optimizer.state().end()) << i;
    if (saved == result.optimizer->state().end()) continue;
    auto& a = static_cast<torch::optim::AdamWParamState&>(*restored->second);
    auto& b = static_cast<torch::optim::AdamWParamState&>(*saved->second);
    EXPECT_EQ(a.step(), b.step());
    EXPECT_TRUE(torch::equal(a.exp_avg(), b.exp_avg()));
    EXPECT_TRUE(torch::equal(a.exp_avg_sq(), b.exp_avg_sq()));
  }
  EXPECT_THROW(load_weights(root_ / "missing", *loaded), TrainingError);
}

TEST_F(TinyRun, RunDirectoryLayout) {
  const auto run = root_ / "run";
  EXPECT_TRUE(fs::exists(run / "config.json"));
  for (const auto* f : {"checkpoint.json", "weights.pt", "optimizer.pt", "vocab.txt"}) {
    EXPECT_TRUE(fs::exists(run / "stage1" / f)) << f;
  }
  EXPECT_TRUE(fs::exists(run / "ddpm" / "weights.pt"));
  EXPECT_TRUE(fs::exists(run / "stage2" / "weights.pt"));
  EXPECT_EQ(read_checkpoint_info(run / "stage2").stage, "stage2");
}

TEST_F(TinyRun, InferWithoutRefinerHasNoDiffusionOutput) {
  auto pipeline = Pipeline::load(root_ / "run", false);
  const auto val = split("val");
  const auto r = pipeline.infer(val.images[0], val.instructions[0]);
  EXPECT_FALSE(r.p_diff.has_value());
  EXPECT_FALSE(r.mask_diff.has_value());
  EXPECT_EQ(r.mask_it.sizes(), (torch::IntArrayRef{64, 64}));
  EXPECT_FALSE(r.truncated);
}

TEST_F(TinyRun, FreshRefinerReproducesStage1Masks) {
  auto pipeline = Pipeline::load(root_ / "run", true);
  ASSERT_TRUE(pipeline.has_refiner());
  pipeline.refiner = make_refiner(pipeline.stage1, pipeline.denoiser, pipeline.config.diffusion);
  const auto preds = pipeline.predict(split("test"));
  EXPECT_TRUE(torch::equal(binarize(preds.p_diff), binarize(preds.p_it)));
  EXPECT_TRUE(torch::allclose(preds.p_diff, preds.p_it, 0.0, 0.0));
}

TEST_F(TinyRun, InferIsDeterministicAndFlagsTruncation) {
  auto pipeline = Pipeline::load(root_ / "run", true);
  const auto test = split("test");
  const auto a = pipeline.infer(test.images[1], test.instructions[1]);
  const auto b = pipeline.infer(test.images[1], test.instructions[1]);
  ASSERT_TRUE(a.p_diff && b.p_diff);
  EXPECT_TRUE(torch::equal(*a.p_diff, *b.p_diff));
  EXPECT_TRUE(torch::equal(a.p_it, b.p_it));

  const auto batched = pipeline.predict(test);
  EXPECT_TRUE(torch::allclose(batched.p_diff[1], *a.p_diff, 1e-5, 1e-6));

  std::string longer = test.instructions[1];
  for (int i = 0; i < 20; ++i) longer += " please";
  EXPECT_TRUE(pipeline.infer(test.images[1], longer).truncated);
  EXPECT_THROW(pipeline.infer(test.images[1], "   "), InvalidInputError);
  EXPECT_THROW(pipeline.infer(test.images, test.instructions[1]), ShapeError);
}

TEST_F(TinyRun, EvalWritesTablesAndSummary) {
  const auto out = root_ / "eval";
  const auto outcome = run_eval(root_ / "run", root_ / "data", "test", true, out);
  ASSERT_TRUE(outcome.stage2.has_value());
  EXPECT_EQ(outcome.stage1.size(), 6u);
  EXPECT_EQ(outcome.ids.size(), 6u);
  for (const auto* f : {"iou_stage1.csv", "iou_stage2.csv", "histogram_stage1.pgm", "summary.json"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  const auto [ids, ious] = read_iou_table(out / "iou_stage1.csv");
  EXPECT_EQ(ids, outcome.ids);
  for (std::size_t i = 0; i < ious.size(); ++i) EXPECT_DOUBLE_EQ(ious[i], outcome.stage1.ious[i]);
}

TEST_F(TinyRun, Stage2NeverEndsWorseThanIdentityOnHoldout) {
  auto pipeline = Pipeline::load(root_ / "run", false);
  auto config = pipeline.config;
  config.diffusion = config_.diffusion;
  const auto schedule = make_schedule(config.diffusion);
  Denoiser denoiser(make_denoiser_options(config.diffusion));
  load_weights(root_ / "run" / "ddpm", *denoiser);
  const auto [fit, held] = holdout_split(split("val"), 0.2);
  const auto fit_cache = build_stage2_cache(pipeline.stage1, denoiser, fit, config.diffusion, schedule);
  const auto held_cache = build_stage2_cache(pipeline.stage1, denoiser, held, config.diffusion, schedule);
  auto refiner = make_refiner(pipeline.stage1, denoiser, config.diffusion);
  const double identity = refiner_loss(refiner, held_cache, true);
  const auto result = train_stage2(refiner, fit_cache, held_cache, config);
  EXPECT_DOUBLE_EQ(result.initial_holdout_loss, identity);
  EXPECT_LE(result.best_holdout_loss, identity);
  EXPECT_DOUBLE_EQ(refiner_loss(refiner, held_cache, true), result.best_holdout_loss);
  EXPECT_EQ(result.iterations, static_cast<std::int64_t>(result.holdout_losses.size()));
  EXPECT_LE(result.iterations, 2 * fit.size());
}

}  // namespace
}  // namespace mdsm
