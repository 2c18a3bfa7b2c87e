#include "mdsm/dataset_io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mdsm/errors.hpp"
#include "mdsm/image_io.hpp"

namespace mdsm {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json scene_to_json(const SceneSpec& scene) {
  json objects = json::array();
  for (const auto& o : scene.objects) {
    objects.push_back({{"shape", shape_name(o.shape)},
                       {"color", color_name(o.color)},
                       {"size", size_name(o.size)},
                       {"center", {o.cx, o.cy}}});
  }
  return {{"objects", objects},
          {"target", scene.target},
          {"room", room_name(scene.room)},
          {"seed", scene.seed}};
}

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

GeneratedDataset generate_dataset(const DatagenConfig& config) {
  const std::size_t total = config.sizes.train + config.sizes.val + config.sizes.test;
  if (total == 0) throw ConfigError("dataset must contain at least one sample");

  GeneratedDataset out;
  out.samples.reserve(total);
  out.scenes.reserve(total);
  std::vector<std::string> ids;
  std::vector<std::string> texts;
  for (std::size_t k = 0; k < total; ++k) {
    SceneSpec scene;
    out.samples.push_back(generate_sample(config.seed, k, config.generation, &scene));
    out.scenes.push_back(std::move(scene));
    ids.push_back(out.samples.back().sample_id);
    texts.push_back(out.samples.back().instruction);
  }
  out.vocab = Vocabulary::build(texts);

  const json echo = {{"train", config.sizes.train},
                     {"val", config.sizes.val},
                     {"test", config.sizes.test},
                     {"seed", config.seed},
                     {"image_size", config.generation.image_size},
                     {"min_objects", config.generation.min_objects},
                     {"max_objects", config.generation.max_objects},
                     {"vocab_hash", hex64(out.vocab.hash())}};
  out.manifests = split_dataset(ids, config.sizes, echo.dump());
  return out;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "split " << manifest.split << '\n';
  out << "config " << manifest.config_echo << '\n';
  for (const auto& id : manifest.sample_ids) out << id << '\n';
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing manifest " + path.string());
  DatasetManifest manifest;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("split ", 0) == 0) {
      manifest.split = line.substr(6);
    } else if (line.rfind("config ", 0) == 0) {
      manifest.config_echo = line.substr(7);
    } else {
      manifest.sample_ids.push_back(line);
    }
  }
  return manifest;
}

void write_dataset(const fs::path& dir, const GeneratedDataset& dataset) {
  fs::create_directories(dir);
  dataset.vocab.save(dir / "vocab.txt");

  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) by_id.emplace(dataset.samples[i].sample_id, i);

  for (const auto& manifest : dataset.manifests) {
    const fs::path split_dir = dir / manifest.split;
    fs::create_directories(split_dir / "images");
    fs::create_directories(split_dir / "masks");
    write_manifest(split_dir / "manifest.txt", manifest);
    std::ofstream records(split_dir / "samples.jsonl");
    for (const auto& id : manifest.sample_ids) {
      const std::size_t i = by_id.at(id);
      const SampleRecord& s = dataset.samples[i];
      write_ppm(split_dir / "images" / (id + ".ppm"), s.image);
      write_pgm(split_dir / "masks" / (id + ".pgm"), s.gt_mask);
      const json row = {{"id", id},
                        {"instruction", s.instruction},
                        {"bbox", {s.target_bbox.x_min, s.target_bbox.y_min, s.target_bbox.x_max, s.target_bbox.y_max}},
                        {"scene", scene_to_json(dataset.scenes.at(i))}};
      records << row.dump() << '\n';
    }
  }
}

SplitData SplitData::select(const torch::Tensor& index) const {
  SplitData out;
  auto idx = index.to(torch::kInt64).contiguous();
  const auto* p = idx.data_ptr<int64_t>();
  for (int64_t i = 0; i < idx.numel(); ++i) {
    out.ids.push_back(ids.at(static_cast<std::size_t>(p[i])));
    out.instructions.push_back(instructions.at(static_cast<std::size_t>(p[i])));
  }
  out.images = images.index_select(0, idx);
  out.masks = masks.index_select(0, idx);
  out.tokens = tokens.index_select(0, idx);
  out.valid_lengths = valid_lengths.index_select(0, idx);
  return out;
}

SplitData make_split(const std::vector<SampleRecord>& samples, const Vocabulary& vocab, std::int64_t max_tokens) {
  if (samples.empty()) throw ConfigError("cannot build an empty split");
  SplitData out;
  std::vector<torch::Tensor> images;
  std::vector<torch::Tensor> masks;
  auto tokens = torch::empty({static_cast<int64_t>(samples.size()), max_tokens}, torch::kInt64);
  auto lengths = torch::empty({static_cast<int64_t>(samples.size())}, torch::kInt64);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto seq = tokenize(samples[i].instruction, vocab, max_tokens);
    tokens[static_cast<int64_t>(i)] = torch::tensor(seq.ids, torch::kInt64);
    lengths[static_cast<int64_t>(i)] = seq.valid_length;
    images.push_back(samples[i].image);
    masks.push_back(samples[i].gt_mask.to(torch::kUInt8));
    out.ids.push_back(samples[i].sample_id);
    out.instructions.push_back(samples[i].instruction);
  }
  out.images = torch::stack(images);
  out.masks = torch::stack(masks);
  out.tokens = tokens;
  out.valid_lengths = lengths;
  return out;
}

SplitData load_split(const fs::path& dir, const std::string& split, const Vocabulary& vocab, std::int64_t max_tokens,
                     std::int64_t limit) {
  const fs::path split_dir = dir / split;
  const DatasetManifest manifest = read_manifest(split_dir / "manifest.txt");

  std::unordered_map<std::string, std::string> instructions;
  {
    std::ifstream in(split_dir / "samples.jsonl");
    if (!in) throw ConfigError("missing " + (split_dir / "samples.jsonl").string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json row = json::parse(line);
      instructions.emplace(row.at("id").get<std::string>(), row.at("instruction").get<std::string>());
    }
  }

  std::vector<SampleRecord> samples;
  for (const auto& id : manifest.sample_ids) {
    if (limit > 0 && static_cast<std::int64_t>(samples.size()) >= limit) break;
    SampleRecord s;
    s.sample_id = id;
    s.image = read_ppm(split_dir / "images" / (id + ".ppm"));
    s.gt_mask = read_pgm(split_dir / "masks" / (id + ".pgm")).ne(0).to(torch::kUInt8);
    const auto it = instructions.find(id);
    if (it == instructions.end()) throw ConfigError("no instruction for sample " + id);
    s.instruction = it->second;
    samples.push_back(std::move(s));
  }
  return make_split(samples, vocab, max_tokens);
}

Vocabulary load_vocabulary(const fs::path& dir) { return Vocabulary::load(dir / "vocab.txt"); }

}  // namespace mdsm
