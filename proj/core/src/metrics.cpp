#include "mdsm/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "mdsm/errors.hpp"
#include "mdsm/image_io.hpp"

namespace mdsm {

MaskOverlap mask_overlap(const torch::Tensor& pred, const torch::Tensor& gt) {
  if (pred.sizes() != gt.sizes()) throw ShapeError("IoU: mask shapes differ");
  const auto p = pred.ne(0);
  const auto g = gt.ne(0);
  return {p.logical_and(g).sum().item<int64_t>(), p.logical_or(g).sum().item<int64_t>()};
}

double iou(const torch::Tensor& pred, const torch::Tensor& gt) {
  const auto o = mask_overlap(pred, gt);
  if (o.union_ == 0) throw InvalidInputError("IoU: ground-truth mask is empty");
  return static_cast<double>(o.intersection) / static_cast<double>(o.union_);
}

EvalResult evaluate(const std::vector<MaskOverlap>& overlaps) {
  if (overlaps.empty()) throw InvalidInputError("evaluate: no samples");
  EvalResult r;
  r.overlaps = overlaps;
  std::int64_t inter = 0;
  std::int64_t uni = 0;
  for (const auto& o : overlaps) {
    if (o.union_ == 0) throw InvalidInputError("evaluate: sample with empty union");
    r.ious.push_back(static_cast<double>(o.intersection) / static_cast<double>(o.union_));
    inter += o.intersection;
    uni += o.union_;
  }
  const auto n = static_cast<double>(r.ious.size());
  r.miou = std::accumulate(r.ious.begin(), r.ious.end(), 0.0) / n;
  r.oiou = static_cast<double>(inter) / static_cast<double>(uni);
  for (std::size_t k = 0; k < kPrecisionThresholds.size(); ++k) {
    const auto hits = std::count_if(r.ious.begin(), r.ious.end(), [&](double v) { return v > kPrecisionThresholds[k]; });
    r.precision[k] = static_cast<double>(hits) / n;
  }
  return r;
}

EvalResult evaluate(const std::vector<torch::Tensor>& preds, const std::vector<torch::Tensor>& gts) {
  if (preds.size() != gts.size()) throw ShapeError("evaluate: prediction and ground-truth counts differ");
  std::vector<MaskOverlap> overlaps;
  overlaps.reserve(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) overlaps.push_back(mask_overlap(preds[i], gts[i]));
  return evaluate(overlaps);
}

namespace {

torch::Tensor drop_channel(const torch::Tensor& masks) {
  return masks.dim() == 4 && masks.size(1) == 1 ? masks.squeeze(1) : masks;
}

}  // namespace

EvalResult evaluate(const torch::Tensor& preds, const torch::Tensor& gts) {
  const auto pm = drop_channel(preds);
  const auto gm = drop_channel(gts);
  if (pm.dim() != 3 || pm.sizes() != gm.sizes()) {
    throw ShapeError("evaluate: prediction and ground-truth shapes differ");
  }
  const auto p = pm.ne(0).flatten(1);
  const auto g = gm.ne(0).flatten(1);
  const auto inter = p.logical_and(g).sum(1).contiguous();
  const auto uni = p.logical_or(g).sum(1).contiguous();
  std::vector<MaskOverlap> overlaps;
  for (int64_t i = 0; i < inter.size(0); ++i) {
    overlaps.push_back({inter[i].item<int64_t>(), uni[i].item<int64_t>()});
  }
  return evaluate(overlaps);
}

const std::vector<ErrorCategory>& error_categories() {
  static const std::vector<ErrorCategory> kCategories = {
      {"SC", "", "serious comprehension error on visual and language information"},
      {"RE", "", "reference or exophora resolution error"},
      {"SEO", "BTE", "segmentation of extra objects"},
      {"OUS", "WNS", "over- or under-segmentation"},
      {"NSG", "", "no segmentation generated"},
      {"SNI", "", "segmentation of a non-target object named in the instruction"},
      {"AE", "", "annotation error in the mask or instruction"},
  };
  return kCategories;
}

ErrorReport error_report(const std::vector<double>& ious, const std::vector<std::string>& sample_ids,
                         std::size_t worst_n) {
  if (ious.size() != sample_ids.size()) throw ShapeError("error_report: id and IoU counts differ");
  if (worst_n > ious.size()) {
    throw InvalidInputError("error_report: worst_n=" + std::to_string(worst_n) + " exceeds N=" +
                            std::to_string(ious.size()));
  }
  std::vector<std::size_t> order(ious.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (ious[a] != ious[b]) return ious[a] < ious[b];
    return sample_ids[a] < sample_ids[b];
  });
  ErrorReport report;
  report.total = ious.size();
  for (std::size_t i = 0; i < worst_n; ++i) report.worst.emplace_back(sample_ids[order[i]], ious[order[i]]);
  report.zero_iou_count = static_cast<std::size_t>(std::count(ious.begin(), ious.end(), 0.0));
  for (const auto& c : error_categories()) report.category_tally[c.key] = 0;
  return report;
}

std::string format_summary(const EvalResult& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "N=" << r.size() << " mIoU=" << 100.0 * r.miou << " oIoU=" << 100.0 * r.oiou;
  for (std::size_t k = 0; k < kPrecisionThresholds.size(); ++k) {
    out << " P@" << std::setprecision(1) << kPrecisionThresholds[k] << "=" << std::setprecision(2)
        << 100.0 * r.precision[k];
  }
  return out.str();
}

std::string format_report(const ErrorReport& report) {
  std::ostringstream out;
  out << "samples: " << report.total << '\n';
  out << "worst: " << report.worst.size() << '\n';
  out << "zero_iou: " << report.zero_iou_count << '\n';
  out << std::fixed << std::setprecision(4);
  for (const auto& [id, value] : report.worst) out << "  " << id << ' ' << value << '\n';
  out << "categories (for manual annotation):\n";
  for (const auto& c : error_categories()) {
    out << "  " << c.key;
    if (!c.alias.empty()) out << "/" << c.alias;
    out << ": " << report.category_tally.at(c.key) << "  # " << c.description << '\n';
  }
  return out.str();
}

void write_iou_table(const std::filesystem::path& path, const std::vector<std::string>& sample_ids,
                     const std::vector<double>& ious) {
  if (sample_ids.size() != ious.size()) throw ShapeError("IoU table: id and IoU counts differ");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "id,iou\n" << std::setprecision(17);
  for (std::size_t i = 0; i < ious.size(); ++i) out << sample_ids[i] << ',' << ious[i] << '\n';
}

std::pair<std::vector<std::string>, std::vector<double>> read_iou_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::pair<std::vector<std::string>, std::vector<double>> out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string id;
    std::string value;
    std::getline(row, id, ',');
    std::getline(row, value, ',');
    out.first.push_back(id);
    out.second.push_back(std::stod(value));
  }
  return out;
}

void write_iou_histogram(const std::filesystem::path& path, const std::vector<double>& ious, int bins) {
  if (bins < 1) throw ConfigError("histogram needs at least one bin");
  std::vector<std::int64_t> counts(static_cast<std::size_t>(bins), 0);
  for (double v : ious) {
    const int b = std::clamp(static_cast<int>(v * bins), 0, bins - 1);
    ++counts[static_cast<std::size_t>(b)];
  }
  const std::int64_t peak = std::max<std::int64_t>(1, *std::max_element(counts.begin(), counts.end()));
  constexpr int kBarWidth = 16;
  constexpr int kHeight = 128;
  auto canvas = torch::ones({kHeight, bins * kBarWidth}, torch::kFloat32);
  for (int b = 0; b < bins; ++b) {
    const auto bar = static_cast<int64_t>(
        std::llround(static_cast<double>(counts[static_cast<std::size_t>(b)]) / static_cast<double>(peak) * (kHeight - 1)));
    if (bar == 0) continue;
    canvas.narrow(0, kHeight - bar, bar).narrow(1, b * kBarWidth + 1, kBarWidth - 2).fill_(0.2);
  }
  write_pgm(path, canvas);
}

}  // namespace mdsm
