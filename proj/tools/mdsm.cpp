// mdsm: dataset generation, two-stage training, evaluation and inference.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mdsm/dataset_io.hpp"
#include "mdsm/errors.hpp"
#include "mdsm/image_io.hpp"
#include "mdsm/metrics.hpp"
#include "mdsm/pipeline.hpp"
#include "mdsm/run_config.hpp"
#include "mdsm/trainer.hpp"

namespace fs = std::filesystem;

namespace {

struct ConfigFlags {
  std::string config_file;
  std::string data_dir;
  std::string run_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> epochs;
  std::optional<std::int64_t> batch_size;
  std::optional<double> learning_rate;
  std::optional<std::int64_t> train_limit;
  std::optional<std::int64_t> warmup_epochs;
  std::optional<std::int64_t> patience;
  std::optional<std::int64_t> t_infer;
  std::optional<std::int64_t> base_channels;
  std::vector<std::int64_t> level_selection;
  bool no_global = false;
  bool verbose = false;
};

enum class Stage { kStage1, kDdpm, kStage2 };

void add_common(CLI::App* cmd, ConfigFlags& f, Stage stage) {
  cmd->add_option("--config", f.config_file, "JSON run config; defaults to <run>/config.json when present");
  cmd->add_option("--data", f.data_dir, "dataset directory")->required();
  cmd->add_option("--run", f.run_dir, "run directory")->required();
  cmd->add_option("--seed", f.seed);
  cmd->add_option("--epochs", f.epochs);
  cmd->add_option("--batch-size", f.batch_size);
  cmd->add_option("--lr", f.learning_rate);
  cmd->add_option("--train-limit", f.train_limit, "use only the first N training samples");
  cmd->add_flag("--verbose", f.verbose);
  if (stage == Stage::kStage1) cmd->add_flag("--no-global", f.no_global, "disable the global image branch");
  if (stage == Stage::kDdpm) cmd->add_option("--base-channels", f.base_channels);
  if (stage == Stage::kStage2) {
    cmd->add_option("--warmup-epochs", f.warmup_epochs);
    cmd->add_option("--patience", f.patience);
    cmd->add_option("--t-infer", f.t_infer);
    cmd->add_option("--levels", f.level_selection, "denoiser levels fused into the refinement head")->delimiter(',');
  }
}

mdsm::RunConfig resolve_config(const ConfigFlags& f, Stage stage) {
  mdsm::RunConfig c;
  if (!f.config_file.empty()) {
    c = mdsm::load_run_config(f.config_file);
  } else if (fs::exists(fs::path(f.run_dir) / "config.json")) {
    c = mdsm::load_run_config(fs::path(f.run_dir) / "config.json");
  }
  c.data_dir = f.data_dir;
  c.run_dir = f.run_dir;
  if (f.seed) c.seed = *f.seed;
  if (f.train_limit) c.train_limit = *f.train_limit;
  if (f.verbose) c.verbose = true;
  auto& opt = stage == Stage::kStage1 ? c.stage1 : stage == Stage::kDdpm ? c.diffusion.optimizer : c.stage2.optimizer;
  if (f.epochs) opt.epochs = *f.epochs;
  if (f.batch_size) opt.batch_size = *f.batch_size;
  if (f.learning_rate) opt.learning_rate = *f.learning_rate;
  if (f.no_global) c.model.use_global_branch = false;
  if (f.base_channels) c.diffusion.base_channels = *f.base_channels;
  if (f.warmup_epochs) c.stage2.warmup_epochs = *f.warmup_epochs;
  if (f.patience) c.stage2.patience = *f.patience;
  if (f.t_infer) c.diffusion.t_infer = *f.t_infer;
  if (!f.level_selection.empty()) c.diffusion.level_selection = f.level_selection;
  mdsm::validate(c);
  return c;
}

void print_eval(const std::string& label, const mdsm::EvalResult& r) {
  std::cout << label << '\n' << mdsm::format_summary(r);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage referring segmentation: synthetic data, training, evaluation"};
  app.require_subcommand(1);

  mdsm::DatagenConfig gen;
  std::string gen_out;
  auto* datagen = app.add_subcommand("datagen", "generate a synthetic dataset");
  datagen->add_option("--out", gen_out, "output directory")->required();
  datagen->add_option("--train", gen.sizes.train);
  datagen->add_option("--val", gen.sizes.val);
  datagen->add_option("--test", gen.sizes.test);
  datagen->add_option("--seed", gen.seed);
  datagen->add_option("--size", gen.generation.image_size, "image side in pixels");
  datagen->add_option("--min-objects", gen.generation.min_objects);
  datagen->add_option("--max-objects", gen.generation.max_objects);

  ConfigFlags s1_flags;
  ConfigFlags ddpm_flags;
  ConfigFlags s2_flags;
  auto* stage1 = app.add_subcommand("train-stage1", "train the intermediate segmentation model");
  add_common(stage1, s1_flags, Stage::kStage1);
  auto* ddpm = app.add_subcommand("train-ddpm", "train the noise predictor on training images");
  add_common(ddpm, ddpm_flags, Stage::kDdpm);
  auto* stage2 = app.add_subcommand("train-stage2", "train the diffusion refinement head on the validation split");
  add_common(stage2, s2_flags, Stage::kStage2);

  std::string eval_data;
  std::string eval_run;
  std::string eval_split = "test";
  std::string eval_out;
  bool eval_stage1_only = false;
  auto* eval = app.add_subcommand("eval", "evaluate a split; writes IoU tables, histograms and summary.json");
  eval->add_option("--data", eval_data)->required();
  eval->add_option("--run", eval_run)->required();
  eval->add_option("--split", eval_split)->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--out", eval_out, "output directory; defaults to <run>/eval_<split>");
  eval->add_flag("--stage1-only", eval_stage1_only, "skip the diffusion refinement");

  std::string infer_run;
  std::string infer_image;
  std::string infer_instruction;
  std::string infer_out;
  bool infer_diffusion = false;
  auto* infer = app.add_subcommand("infer", "segment one image");
  infer->add_option("--run", infer_run)->required();
  infer->add_option("--image", infer_image, "P6 image")->required()->check(CLI::ExistingFile);
  infer->add_option("--instruction", infer_instruction)->required();
  infer->add_option("--out", infer_out, "P5 mask output")->required();
  infer->add_flag("--diffusion", infer_diffusion, "also run the refinement stage; --out receives its mask");

  std::string report_table;
  std::size_t report_worst = 10;
  std::string report_out;
  auto* report = app.add_subcommand("report", "worst-N error report from an IoU table");
  report->add_option("--table", report_table, "CSV written by eval")->required()->check(CLI::ExistingFile);
  report->add_option("--worst-n", report_worst);
  report->add_option("--out", report_out, "also write the report to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*datagen) {
      const auto dataset = mdsm::generate_dataset(gen);
      mdsm::write_dataset(gen_out, dataset);
      std::cout << "wrote " << dataset.samples.size() << " samples to " << gen_out << '\n';
    } else if (*stage1) {
      const auto result = mdsm::run_stage1(resolve_config(s1_flags, Stage::kStage1));
      std::cout << "stage1: " << result.steps << " steps, best epoch " << result.best_epoch << ", val mIoU "
                << result.best_val_miou << '\n';
    } else if (*ddpm) {
      const auto stats = mdsm::run_ddpm(resolve_config(ddpm_flags, Stage::kDdpm));
      std::cout << "ddpm: " << stats.steps << " steps, final loss " << stats.final_epoch_loss << '\n';
    } else if (*stage2) {
      const auto result = mdsm::run_stage2(resolve_config(s2_flags, Stage::kStage2));
      std::cout << "stage2: " << result.iterations << " iterations, best iteration " << result.best_iteration
                << ", holdout MAE " << result.initial_holdout_loss << " -> " << result.best_holdout_loss
                << (result.stopped_early ? " (early stop)" : "") << '\n';
    } else if (*eval) {
      const fs::path out = eval_out.empty() ? fs::path(eval_run) / ("eval_" + eval_split) : fs::path(eval_out);
      const auto outcome = mdsm::run_eval(eval_run, eval_data, eval_split, !eval_stage1_only, out);
      print_eval("stage1", outcome.stage1);
      if (outcome.stage2) print_eval("stage2", *outcome.stage2);
      std::cout << "tables and histograms in " << out.string() << '\n';
    } else if (*infer) {
      auto pipeline = mdsm::Pipeline::load(infer_run, infer_diffusion);
      const auto result = pipeline.infer(mdsm::read_ppm(infer_image), infer_instruction);
      if (result.truncated) {
        std::cerr << "warning: instruction longer than " << pipeline.config.model.max_tokens
                  << " words was truncated\n";
      }
      const auto& mask = result.mask_diff ? *result.mask_diff : result.mask_it;
      mdsm::write_pgm(infer_out, mask);
      std::cout << "foreground pixels: " << mask.sum().item<std::int64_t>() << '\n';
    } else if (*report) {
      const auto [ids, ious] = mdsm::read_iou_table(report_table);
      const auto text = mdsm::format_report(mdsm::error_report(ious, ids, report_worst));
      std::cout << text;
      if (!report_out.empty()) {
        std::ofstream out(report_out);
        if (!out) throw mdsm::ConfigError("cannot write " + report_out);
        out << text;
      }
    }
  } catch (const std::exception& e) {
    std::string message = e.what();
    if (const auto nl = message.find('\n'); nl != std::string::npos) message.resize(nl);
    std::cerr << "mdsm: error: " << message << '\n';
    return 1;
  }
  return 0;
}
