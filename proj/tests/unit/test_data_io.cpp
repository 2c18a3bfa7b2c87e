#include <filesystem>
#include <fstream>

#include <unistd.h>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "mdsm/dataset_io.hpp"
#include "mdsm/errors.hpp"
#include "mdsm/image_io.hpp"
#include "mdsm/vocabulary.hpp"

namespace mdsm {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("mdsm_unit_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TEST(Tokenize, EmptyTextIsAllPadding) {
  const auto vocab = Vocabulary::build({"fetch the pillow"});
  const auto seq = tokenize("", vocab, 8);
  EXPECT_EQ(seq.valid_length, 0);
  EXPECT_EQ(seq.ids, std::vector<std::int64_t>(8, kPadId));
}

TEST(Tokenize, CountsWordsAndPads) {
  const auto vocab = Vocabulary::build({"fetch the pillow"});
  const auto seq = tokenize("Fetch the pillow", vocab, 8);
  EXPECT_EQ(seq.valid_length, 3);
  ASSERT_EQ(seq.ids.size(), 8u);
  EXPECT_EQ(seq.ids[0], vocab.id("fetch"));
  EXPECT_EQ(seq.ids[1], vocab.id("the"));
  EXPECT_EQ(seq.ids[2], vocab.id("pillow"));
  for (std::size_t i = 3; i < 8; ++i) EXPECT_EQ(seq.ids[i], kPadId);
}

TEST(Tokenize, UnknownWordMapsToUnk) {
  const auto vocab = Vocabulary::build({"fetch the pillow"});
  const auto seq = tokenize("fetch the radio", vocab, 4);
  EXPECT_EQ(seq.ids[2], kUnkId);
  EXPECT_EQ(seq.valid_length, 3);
}

TEST(Tokenize, TruncatesAndPunctuationSplits) {
  const auto vocab = Vocabulary::build({"go to the kitchen and fetch it"});
  const auto seq = tokenize("Go to the kitchen, and fetch it.", vocab, 4);
  EXPECT_EQ(seq.valid_length, 4);
  EXPECT_EQ(seq.ids[3], vocab.id("kitchen"));
  EXPECT_THROW(tokenize("x", vocab, 0), ConfigError);
}

TEST(VocabularyTest, ReservedIdsAndRoundTrip) {
  const auto vocab = Vocabulary::build({"b a", "c a"});
  EXPECT_EQ(vocab.token(kPadId), "<pad>");
  EXPECT_EQ(vocab.token(kUnkId), "<unk>");
  EXPECT_EQ(vocab.size(), 5);
  for (std::int64_t i = 0; i < vocab.size(); ++i) EXPECT_EQ(vocab.id(vocab.token(i)), i);
  const auto dir = scratch_dir("vocab");
  vocab.save(dir / "vocab.txt");
  const auto loaded = Vocabulary::load(dir / "vocab.txt");
  EXPECT_EQ(loaded, vocab);
  EXPECT_EQ(loaded.hash(), vocab.hash());
}

TEST(ImageIo, PpmAndPgmRoundTripExactly) {
  const auto dir = scratch_dir("images");
  auto image = torch::randint(0, 256, {3, 5, 7}, torch::kInt64).to(torch::kFloat32) / 255.0F;
  write_ppm(dir / "x.ppm", image);
  EXPECT_TRUE(torch::equal(read_ppm(dir / "x.ppm"), image));
  auto mask = torch::randint(0, 2, {5, 7}, torch::kInt64).to(torch::kUInt8);
  write_pgm(dir / "m.pgm", mask);
  EXPECT_TRUE(torch::equal(read_pgm(dir / "m.pgm").ne(0).to(torch::kUInt8), mask));
}

TEST(ImageIo, MissingFileThrows) {
  EXPECT_ANY_THROW(read_ppm("/nonexistent/mdsm.ppm"));
}

TEST(DatasetIo, GenerateWriteLoadRoundTrip) {
  DatagenConfig config;
  config.sizes = {6, 2, 2};
  config.seed = 3;
  const auto dataset = generate_dataset(config);
  ASSERT_EQ(dataset.samples.size(), 10u);
  EXPECT_EQ(dataset.manifests[0].sample_ids.size(), 6u);
  EXPECT_NE(dataset.manifests[0].config_echo.find("vocab_hash"), std::string::npos);

  const auto dir = scratch_dir("dataset");
  write_dataset(dir, dataset);
  const auto vocab = load_vocabulary(dir);
  EXPECT_EQ(vocab, dataset.vocab);
  const auto manifest = read_manifest(dir / "val" / "manifest.txt");
  EXPECT_EQ(manifest.split, "val");
  EXPECT_EQ(manifest.sample_ids, dataset.manifests[1].sample_ids);
  EXPECT_EQ(manifest.config_echo, dataset.manifests[1].config_echo);

  const auto train = load_split(dir, "train", vocab, 20);
  ASSERT_EQ(train.size(), 6);
  EXPECT_EQ(train.images.sizes(), (std::vector<std::int64_t>{6, 3, 64, 64}));
  EXPECT_EQ(train.masks.sizes(), (std::vector<std::int64_t>{6, 64, 64}));
  EXPECT_EQ(train.tokens.sizes(), (std::vector<std::int64_t>{6, 20}));
  for (std::int64_t i = 0; i < 6; ++i) {
    EXPECT_TRUE(torch::equal(train.images[i], dataset.samples[static_cast<std::size_t>(i)].image));
    EXPECT_TRUE(torch::equal(train.masks[i], dataset.samples[static_cast<std::size_t>(i)].gt_mask));
    EXPECT_EQ(train.instructions[static_cast<std::size_t>(i)], dataset.samples[static_cast<std::size_t>(i)].instruction);
  }
  const auto limited = load_split(dir, "train", vocab, 20, 2);
  EXPECT_EQ(limited.size(), 2);
  const auto picked = train.select(torch::tensor({4, 1}, torch::kInt64));
  EXPECT_EQ(picked.ids, (std::vector<std::string>{train.ids[4], train.ids[1]}));
  EXPECT_TRUE(torch::equal(picked.images[0], train.images[4]));
}

TEST(DatasetIo, RegenerationIsBitIdentical) {
  DatagenConfig config;
  config.sizes = {3, 1, 1};
  config.seed = 17;
  const auto a = generate_dataset(config);
  const auto b = generate_dataset(config);
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_TRUE(torch::equal(a.samples[i].image, b.samples[i].image));
    EXPECT_TRUE(torch::equal(a.samples[i].gt_mask, b.samples[i].gt_mask));
    EXPECT_EQ(a.samples[i].instruction, b.samples[i].instruction);
  }
  EXPECT_EQ(a.manifests[0].config_echo, b.manifests[0].config_echo);
}

TEST(DatasetIo, MissingSplitThrows) {
  const auto dir = scratch_dir("missing");
  EXPECT_ANY_THROW(load_split(dir, "train", Vocabulary(), 20));
}

}  // namespace
}  // namespace mdsm
