#pragma once

// On-disk layout of a generated dataset:
//   <dir>/vocab.txt                      one token per line, line number = id
//   <dir>/<split>/manifest.txt           "split <name>", "config <json>", then one sample id per line
//   <dir>/<split>/samples.jsonl          one JSON object per sample (instruction, bbox, scene)
//   <dir>/<split>/images/<id>.ppm        P6 RGB image
//   <dir>/<split>/masks/<id>.pgm         P5 mask, 0 / 255

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mdsm/synth_dataset.hpp"
#include "mdsm/vocabulary.hpp"

namespace mdsm {

struct DatagenConfig {
  SplitSizes sizes{800, 100, 100};
  std::uint64_t seed = 0;
  GenerationConfig generation;
};

struct GeneratedDataset {
  std::vector<SampleRecord> samples;
  std::vector<SceneSpec> scenes;
  std::array<DatasetManifest, 3> manifests;
  Vocabulary vocab;
};

/// Deterministic in `config`: sample k is generated from derive_seed(seed, k, attempt).
GeneratedDataset generate_dataset(const DatagenConfig& config);

void write_dataset(const std::filesystem::path& dir, const GeneratedDataset& dataset);

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Tensors for one split, ready for batching.
struct SplitData {
  std::vector<std::string> ids;
  std::vector<std::string> instructions;
  torch::Tensor images;         // [N, 3, H, W] float32
  torch::Tensor masks;          // [N, H, W] uint8
  torch::Tensor tokens;         // [N, l] int64
  torch::Tensor valid_lengths;  // [N] int64

  std::int64_t size() const { return static_cast<std::int64_t>(ids.size()); }
  /// Rows `index` of every tensor (and the matching ids).
  SplitData select(const torch::Tensor& index) const;
};

SplitData make_split(const std::vector<SampleRecord>& samples, const Vocabulary& vocab, std::int64_t max_tokens);

/// Loads `<dir>/<split>`; `limit` > 0 keeps only the first `limit` samples.
SplitData load_split(const std::filesystem::path& dir, const std::string& split, const Vocabulary& vocab,
                     std::int64_t max_tokens, std::int64_t limit = 0);

Vocabulary load_vocabulary(const std::filesystem::path& dir);

}  // namespace mdsm
