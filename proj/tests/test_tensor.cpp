#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "mkd/mkd.hpp"

using namespace mkd;

TEST(Tensor, ConstructorRejectsWrongLength) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  Tensor t({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
}

TEST(Tensor, ShapeErrorsNameBothShapes) {
  Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos);
    EXPECT_NE(msg.find("4x5"), std::string::npos);
  }
  EXPECT_THROW(add(a, b), DimensionError);
  EXPECT_THROW(linear(a, b), DimensionError);
}

TEST(Tensor, MatmulValues) {
  Tensor a({2, 2}, {1, 2, 3, 4}), b({2, 1}, {5, 6});
  auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(c[0], 17);
  EXPECT_DOUBLE_EQ(c[1], 39);
}

TEST(Tensor, LeafGradientsAccumulateAcrossBackwardCalls) {
  Tensor x({2}, {1.0, 2.0}, true);
  sum(mul(x, x)).backward();
  sum(mul(x, x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Tensor, SharedSubexpressionGetsBothContributions) {
  Tensor x({1}, {3.0}, true);
  Tensor y = mul(x, x);
  sum(add(y, y)).backward();  // d/dx 2x^2
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Tensor, NoGradGuardDetachesResults) {
  Tensor x({1}, {3.0}, true);
  Tensor y;
  {
    NoGradGuard ng;
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
}

TEST(Tensor, BackwardNeedsScalar) {
  Tensor x({2}, {1.0, 2.0}, true);
  EXPECT_THROW(mul(x, x).backward(), DimensionError);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  Tensor x({2, 3}, {1, 2, 3, -1, 0, 1000});
  auto p = softmax(x, 1);
  for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(p[r * 3] + p[r * 3 + 1] + p[r * 3 + 2], 1.0, 1e-12);
  EXPECT_NEAR(p[5], 1.0, 1e-12);
}

TEST(Tensor, MaskedAttentionSoftmaxZeroesPaddedKeys) {
  Tensor s({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const std::vector<int> mask{1, 1, 0};
  auto p = masked_attention_softmax(s, mask);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(p[i * 3 + 2], 0.0);
    EXPECT_NEAR(p[i * 3] + p[i * 3 + 1], 1.0, 1e-12);
  }
}

TEST(Tensor, EmbeddingRejectsOutOfRangeId) {
  Tensor t = Tensor::zeros({3, 2});
  const std::vector<int> ids{0, 3};
  EXPECT_THROW(embedding(t, ids), std::out_of_range);
}

TEST(Tensor, MaskedPoolRejectsAllPaddingRow) {
  Tensor x = Tensor::zeros({1, 2, 2});
  const std::vector<int> mask{0, 0};
  EXPECT_THROW(masked_pool(x, mask), std::invalid_argument);
}

TEST(Tensor, CrossEntropyOfUniformLogitsIsLogC) {
  Tensor x = Tensor::zeros({4, 5});
  const std::vector<int> t{0, 1, 2, 4};
  EXPECT_NEAR(cross_entropy(x, t).item(), std::log(5.0), 1e-15);
  EXPECT_THROW(cross_entropy(x, std::vector<int>{0, 1, 2, 5}), std::out_of_range);
}

TEST(Tensor, SoftCrossEntropyRejectsUnnormalisedTargets) {
  Tensor x = Tensor::zeros({1, 2});
  EXPECT_THROW(soft_cross_entropy(x, std::vector<double>{0.3, 0.3}), std::invalid_argument);
}

TEST(Optim, AdamMovesTowardMinimum) {
  ParameterStore store;
  Tensor& w = store.add("w", Tensor({1}, {5.0}));
  Adam opt({.lr = 0.1});
  std::vector<Parameter*> ps{&store.at("w")};
  for (int i = 0; i < 300; ++i) {
    store.zero_grad();
    sum(mul(w, w)).backward();
    opt.step(ps);
  }
  EXPECT_LT(std::abs(w[0]), 0.05);
}

TEST(Optim, AdamRejectsMissingGradient) {
  ParameterStore store;
  store.add("w", Tensor({1}, {1.0}));
  Adam opt;
  std::vector<Parameter*> ps{&store.at("w")};
  EXPECT_THROW(opt.step(ps), std::runtime_error);
}

TEST(Optim, DuplicateParameterNameRejected) {
  ParameterStore store;
  store.add("w", Tensor::zeros({1}));
  EXPECT_THROW(store.add("w", Tensor::zeros({1})), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ParameterStore a;
  a.add("x", Tensor({2, 2}, {0.1, -2.5, 1e-300, 3.0}));
  a.add("y", Tensor({3}, {7, 8, 9}));
  const auto path = std::filesystem::temp_directory_path() / "mkd_ckpt_roundtrip.bin";
  write_checkpoint(path.string(), to_checkpoint(a, {{"note", "hi"}}));
  const auto c = read_checkpoint(path.string());
  EXPECT_EQ(c.meta.at("note"), "hi");
  ParameterStore b;
  b.add("x", Tensor::zeros({2, 2}));
  b.add("y", Tensor::zeros({3}));
  load_into(b, c);
  for (const auto& name : {"x", "y"}) {
    const auto da = a.at(name).tensor.data(), db = b.at(name).tensor.data();
    for (std::size_t i = 0; i < da.size(); ++i) EXPECT_EQ(std::memcmp(&da[i], &db[i], sizeof(double)), 0);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsBadMagicAndShapeMismatch) {
  EXPECT_THROW(parse_checkpoint("NOPE\nxxxxxxxx"), std::runtime_error);
  ParameterStore a;
  a.add("x", Tensor::zeros({2}));
  const auto bytes = serialize_checkpoint(to_checkpoint(a));
  EXPECT_EQ(bytes.compare(0, 5, "MKD1\n"), 0);
  ParameterStore b;
  b.add("x", Tensor::zeros({3}));
  EXPECT_THROW(load_into(b, parse_checkpoint(bytes)), DimensionError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), std::runtime_error);
}
