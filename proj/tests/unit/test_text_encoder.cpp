#include <gtest/gtest.h>
#include <torch/torch.h>

#include "mdsm/errors.hpp"
#include "mdsm/text_encoder.hpp"
#include "support/gradcheck.hpp"

namespace mdsm {
namespace {

TextEncoderOptions small_options() {
  TextEncoderOptions o;
  o.vocab_size = 12;
  o.dim = 16;
  o.layers = 2;
  o.heads = 4;
  o.max_length = 6;
  o.ff_dim = 32;
  return o;
}

TEST(TextEncoder, OutputIsCByL) {
  torch::manual_seed(0);
  TextEncoder enc(small_options());
  enc->eval();
  auto ids = torch::randint(2, 12, {3, 6}, torch::kInt64);
  auto out = enc->forward(ids, torch::tensor({6, 3, 1}, torch::kInt64));
  EXPECT_EQ(out.features.sizes(), (std::vector<std::int64_t>{3, 16, 6}));
  EXPECT_EQ(out.valid.sizes(), (std::vector<std::int64_t>{3, 6}));
  EXPECT_TRUE(torch::isfinite(out.features).all().item<bool>());
  EXPECT_TRUE(out.valid[1][2].item<bool>());
  EXPECT_FALSE(out.valid[1][3].item<bool>());
}

TEST(TextEncoder, PadContentDoesNotReachValidColumns) {
  torch::manual_seed(1);
  TextEncoder enc(small_options());
  enc->eval();
  auto a = torch::tensor({{3, 4, 5, 0, 0, 0}}, torch::kInt64);
  auto b = torch::tensor({{3, 4, 5, 9, 11, 2}}, torch::kInt64);
  auto len = torch::tensor({3}, torch::kInt64);
  auto fa = enc->forward(a, len).features.narrow(2, 0, 3);
  auto fb = enc->forward(b, len).features.narrow(2, 0, 3);
  EXPECT_TRUE(torch::equal(fa, fb));
}

TEST(TextEncoder, AllPaddingStaysFinite) {
  torch::manual_seed(2);
  TextEncoder enc(small_options());
  auto out = enc->forward(torch::zeros({1, 6}, torch::kInt64), torch::tensor({0}, torch::kInt64));
  EXPECT_TRUE(torch::isfinite(out.features).all().item<bool>());
  EXPECT_FALSE(out.valid.any().item<bool>());
}

TEST(TextEncoder, RejectsWrongLengthAndIds) {
  TextEncoder enc(small_options());
  EXPECT_THROW(enc->forward(torch::zeros({1, 5}, torch::kInt64), torch::tensor({1}, torch::kInt64)), ConfigError);
  EXPECT_THROW(enc->forward(torch::full({1, 6}, 12, torch::kInt64), torch::tensor({1}, torch::kInt64)), ConfigError);
  EXPECT_THROW(TextEncoder(TextEncoderOptions{12, 10, 1, 4, 6, 8}), ConfigError);
}

TEST(TextEncoder, ValidMask) {
  auto m = valid_mask(torch::tensor({0, 2, 4}, torch::kInt64), 4);
  auto expected = torch::tensor({{0, 0, 0, 0}, {1, 1, 0, 0}, {1, 1, 1, 1}}, torch::kBool);
  EXPECT_TRUE(torch::equal(m, expected));
}

TEST(TextEncoder, EmbeddingGradientsMatchFiniteDifferences) {
  torch::manual_seed(3);
  auto opts = small_options();
  opts.vocab_size = 6;
  opts.dim = 10;
  opts.heads = 2;
  opts.ff_dim = 16;
  TextEncoder enc(opts);
  enc->to(torch::kFloat64);
  auto ids = torch::tensor({{2, 3, 4, 5, 1, 0}, {5, 4, 3, 2, 0, 0}}, torch::kInt64);
  auto len = torch::tensor({5, 4}, torch::kInt64);
  testing::ProjectedLoss project(7);
  auto loss = [&] { return project(enc->forward(ids, len).features); };
  const auto result =
      testing::gradcheck({{"embedding.weight", enc->embedding()->weight}}, loss, 50, 11);
  EXPECT_EQ(result.checked, 50);
  EXPECT_LT(result.max_rel_error, 1e-4) << result.worst_parameter;
}

TEST(TextEncoder, AllParameterGradientsMatchFiniteDifferences) {
  torch::manual_seed(4);
  auto opts = small_options();
  opts.dim = 8;
  opts.heads = 2;
  opts.ff_dim = 16;
  TextEncoder enc(opts);
  enc->to(torch::kFloat64);
  auto ids = torch::randint(1, 12, {2, 6}, torch::kInt64);
  auto len = torch::tensor({6, 3}, torch::kInt64);
  testing::ProjectedLoss project(8);
  auto loss = [&] { return project(enc->forward(ids, len).features); };
  const auto result = testing::gradcheck(testing::named(*enc), loss, 60, 12);
  EXPECT_EQ(result.checked, 60);
  EXPECT_LT(result.max_rel_error, 1e-4) << result.worst_parameter;
}

}  // namespace
}  // namespace mdsm
