#pragma once

// Training loops for both stages, early stopping, evaluation, and the
// run-directory entry points used by the command-line tool.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "mdsm/dataset_io.hpp"
#include "mdsm/diffusion_refiner.hpp"
#include "mdsm/metrics.hpp"
#include "mdsm/pipeline.hpp"
#include "mdsm/run_config.hpp"

namespace mdsm {

/// Patience counter over validation losses. Updates during warm-up may set a
/// new best but never advance the counter.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::int64_t patience);

  struct Decision {
    bool improved = false;
    bool stop = false;
  };

  /// Loss of the untrained state; counts as iteration 0.
  void baseline(double loss);
  /// Loss after the next iteration (1-based count).
  Decision update(double loss, bool warmup);

  std::int64_t iteration() const { return iteration_; }
  std::int64_t best_iteration() const { return best_iteration_; }
  double best_loss() const { return best_loss_; }
  std::int64_t stale() const { return stale_; }

 private:
  std::int64_t patience_;
  std::int64_t iteration_ = 0;
  std::int64_t best_iteration_ = -1;
  double best_loss_;
  std::int64_t stale_ = 0;
};

struct Stage1Result {
  std::int64_t epochs_run = 0;
  std::int64_t steps = 0;
  std::vector<double> epoch_losses;
  std::vector<double> val_mious;     // one per epoch when validation data is given
  std::int64_t best_epoch = 0;       // 0 = initial weights
  double best_val_miou = 0.0;
  std::shared_ptr<torch::optim::AdamW> optimizer;
};

/// Minimizes the stage-1 cross entropy with AdamW. With validation data the
/// weights of the epoch with the highest validation mIoU are restored at the end.
Stage1Result train_stage1(IntermediateModel& model, const SplitData& train, const SplitData* val,
                          const RunConfig& config);

/// Per-sample stage-2 inputs computed once with stage 1 and the denoiser frozen.
struct Stage2Cache {
  std::vector<torch::Tensor> estimates;  // per selected level, [N, C, h, w]
  std::vector<torch::Tensor> stack;      // per decoded level, [N, C, h, w]
  torch::Tensor p_it;                    // [N, 1, H, W]
  torch::Tensor targets;                 // [N, 1, H, W] float

  std::int64_t size() const { return p_it.defined() ? p_it.size(0) : 0; }
  Stage2Cache select(const torch::Tensor& index) const;
  DecodedFeatureStack decoded() const { return {stack}; }
};

Stage2Cache build_stage2_cache(IntermediateModel& stage1, Denoiser& denoiser, const SplitData& data,
                               const DiffusionConfig& config, const NoiseSchedule& schedule,
                               std::int64_t batch_size = 32);

/// Contiguous (train, holdout) partition; the holdout is the last ceil(fraction * N) rows.
std::pair<SplitData, SplitData> holdout_split(const SplitData& data, double fraction);

/// Refined probabilities for every cached sample, in eval mode.
torch::Tensor refine(Refiner& refiner, const Stage2Cache& cache, bool clamp);
/// Mean absolute error of the refined map on the cache, in eval mode.
double refiner_loss(Refiner& refiner, const Stage2Cache& cache, bool clamp);

struct Stage2Result {
  std::int64_t iterations = 0;       // optimizer steps taken
  std::int64_t best_iteration = 0;   // 0 = identity initialization
  double initial_holdout_loss = 0.0;
  double best_holdout_loss = 0.0;
  bool stopped_early = false;
  std::vector<double> holdout_losses;  // after each iteration
  std::shared_ptr<torch::optim::Adam> optimizer;
};

/// Trains fusion and head with batch size 1. Holdout loss is checked after every
/// step; the best state (including the untrained one) is restored at the end.
Stage2Result train_stage2(Refiner& refiner, const Stage2Cache& train, const Stage2Cache& holdout,
                          const RunConfig& config);

/// Run-directory entry points. Each writes its checkpoint under config.run_dir.
Stage1Result run_stage1(const RunConfig& config);
DenoiserTrainStats run_ddpm(const RunConfig& config);
Stage2Result run_stage2(const RunConfig& config);

struct EvalOutcome {
  EvalResult stage1;
  std::optional<EvalResult> stage2;
  std::vector<std::string> ids;
};

/// Evaluates a split and writes iou_<stage>.csv, histogram_<stage>.pgm and
/// summary.json into `out_dir`.
EvalOutcome run_eval(const std::filesystem::path& run_dir, const std::filesystem::path& data_dir,
                     const std::string& split, bool with_refiner, const std::filesystem::path& out_dir);

}  // namespace mdsm
