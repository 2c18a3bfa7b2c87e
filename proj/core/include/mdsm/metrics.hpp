#pragma once

// Referring-segmentation metrics: per-sample IoU, mIoU, oIoU, precision at IoU
// thresholds, and the worst-N error report.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace mdsm {

inline constexpr std::array<double, 5> kPrecisionThresholds = {0.5, 0.6, 0.7, 0.8, 0.9};

struct MaskOverlap {
  std::int64_t intersection = 0;
  std::int64_t union_ = 0;
};

/// Pixel counts of pred AND gt / pred OR gt for two same-shape binary masks.
MaskOverlap mask_overlap(const torch::Tensor& pred, const torch::Tensor& gt);

/// |pred & gt| / |pred | gt|. Requires a nonempty ground truth.
double iou(const torch::Tensor& pred, const torch::Tensor& gt);

struct EvalResult {
  std::vector<double> ious;
  std::vector<MaskOverlap> overlaps;
  double miou = 0.0;
  double oiou = 0.0;
  std::array<double, kPrecisionThresholds.size()> precision{};  // P@k for kPrecisionThresholds

  std::size_t size() const { return ious.size(); }
};

EvalResult evaluate(const std::vector<MaskOverlap>& overlaps);
EvalResult evaluate(const std::vector<torch::Tensor>& preds, const std::vector<torch::Tensor>& gts);
/// Batched form: [N, H, W] (or [N, 1, H, W]) predictions and masks.
EvalResult evaluate(const torch::Tensor& preds, const torch::Tensor& gts);

/// Error categories used for manual annotation of failures.
struct ErrorCategory {
  std::string key;
  std::string alias;  // alternative label, empty if none
  std::string description;
};
const std::vector<ErrorCategory>& error_categories();

struct ErrorReport {
  std::vector<std::pair<std::string, double>> worst;  // (sample id, IoU), ascending IoU, ties by id
  std::size_t zero_iou_count = 0;
  std::map<std::string, std::int64_t> category_tally;  // every key present, all zero
  std::size_t total = 0;
};

ErrorReport error_report(const std::vector<double>& ious, const std::vector<std::string>& sample_ids,
                         std::size_t worst_n);

/// Human-readable summary lines.
std::string format_report(const ErrorReport& report);
std::string format_summary(const EvalResult& result);

/// "id,iou" per line with a header row.
void write_iou_table(const std::filesystem::path& path, const std::vector<std::string>& sample_ids,
                     const std::vector<double>& ious);
/// Reads a table written by write_iou_table (first two columns).
std::pair<std::vector<std::string>, std::vector<double>> read_iou_table(const std::filesystem::path& path);

/// Renders a `bins`-bucket IoU histogram as a grey bar chart (P5).
void write_iou_histogram(const std::filesystem::path& path, const std::vector<double>& ious, int bins = 10);

}  // namespace mdsm
