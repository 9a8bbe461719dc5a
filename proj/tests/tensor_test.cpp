#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "phqfuse/gradcheck.hpp"
#include "phqfuse/tensor.hpp"

using namespace phqfuse;

namespace {

Tensor rand_matrix(std::size_t m, std::size_t n, Rng& rng, bool grad = false) {
  return Tensor::uniform({m, n}, -2.0f, 2.0f, rng, grad);
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Rng rng = make_rng(1, "t");
  Tensor b = rand_matrix(3, 5, rng);
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.mutable_data()[i * 3 + i] = 1.0f;
  Tensor c = matmul(eye, b);
  for (std::size_t i = 0; i < b.numel(); ++i) EXPECT_EQ(c.data()[i], b.data()[i]);

  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor r = matmul(a, i2);
  EXPECT_EQ(std::vector<float>(r.data().begin(), r.data().end()), (std::vector<float>{1, 2, 3, 4}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng = make_rng(2, "t");
  for (int rep = 0; rep < 20; ++rep) {
    Tensor a = rand_matrix(4, 5, rng), b = rand_matrix(5, 3, rng);
    Tensor c = matmul(a, b);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int t = 0; t < 5; ++t) s += static_cast<double>(a.at(i, t)) * b.at(t, j);
        EXPECT_NEAR(c.at(i, j), s, 1e-6);
      }
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("[4x2]"), std::string::npos) << e.what();
  }
}

TEST(Matmul, RightIdentityIsBitwise) {
  Rng rng = make_rng(3, "t");
  Tensor a = rand_matrix(4, 4, rng), b = rand_matrix(4, 6, rng);
  Tensor eye = Tensor::zeros({4, 4});
  for (int i = 0; i < 4; ++i) eye.mutable_data()[i * 4 + i] = 1.0f;
  Tensor lhs = matmul(matmul(a, eye), b), rhs = matmul(a, b);
  for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_EQ(lhs.data()[i], rhs.data()[i]);
}

TEST(Softmax, UniformAndStable) {
  Tensor u = softmax_rows(Tensor::zeros({1, 4}));
  for (float v : u.data()) EXPECT_FLOAT_EQ(v, 0.25f);
  Tensor s = softmax_rows(Tensor::from({1, 2}, {1000.0f, 0.0f}));
  EXPECT_NEAR(s.data()[0], 1.0f, 1e-6);
  EXPECT_NEAR(s.data()[1], 0.0f, 1e-6);
}

TEST(Softmax, MatchesDirectFormulaAndShiftInvariant) {
  Rng rng = make_rng(4, "t");
  for (int rep = 0; rep < 50; ++rep) {
    Tensor x = rand_matrix(3, 7, rng);
    Tensor y = softmax_rows(x);
    std::vector<float> shifted(x.data().begin(), x.data().end());
    for (auto& v : shifted) v += 3.5f;
    Tensor y2 = softmax_rows(Tensor::from({3, 7}, shifted));
    for (int i = 0; i < 3; ++i) {
      double mx = -1e30, den = 0.0, sum = 0.0;
      for (int j = 0; j < 7; ++j) mx = std::max(mx, static_cast<double>(x.at(i, j)));
      for (int j = 0; j < 7; ++j) den += std::exp(x.at(i, j) - mx);
      for (int j = 0; j < 7; ++j) {
        EXPECT_NEAR(y.at(i, j), std::exp(x.at(i, j) - mx) / den, 1e-6);
        EXPECT_NEAR(y.at(i, j), y2.at(i, j), 1e-6);
        EXPECT_GE(y.at(i, j), 0.0f);
        sum += y.at(i, j);
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(Backward, SquareAndSumOfProduct) {
  Tensor x = Tensor::scalar(3.0f, true);
  Tensor y = mul(x, x);
  backward(y);
  EXPECT_FLOAT_EQ(x.grad()[0], 6.0f);

  Rng rng = make_rng(5, "t");
  Tensor a = rand_matrix(3, 4, rng, true), b = rand_matrix(4, 2, rng, true);
  backward(sum(matmul(a, b)));
  for (int i = 0; i < 3; ++i)
    for (int t = 0; t < 4; ++t) EXPECT_NEAR(a.grad()[i * 4 + t], b.at(t, 0) + b.at(t, 1), 1e-6);
}

TEST(Backward, NonScalarIsContractError) {
  Tensor a = Tensor::zeros({2, 2}, true);
  EXPECT_THROW(backward(scale(a, 2.0f)), ContractError);
}

TEST(Backward, RepeatedCallsGiveIdenticalGradients) {
  Rng rng = make_rng(6, "t");
  Tensor a = rand_matrix(3, 4, rng, true), b = rand_matrix(4, 3, rng, true);
  Tensor loss = sum(silu(matmul(a, b)));
  backward(loss);
  std::vector<float> g1(a.grad().begin(), a.grad().end());
  backward(loss);
  std::vector<float> g2(a.grad().begin(), a.grad().end());
  EXPECT_EQ(g1, g2);
}

TEST(Elementwise, SiluMeanSqrt) {
  EXPECT_EQ(silu(Tensor::scalar(0.0f)).item(), 0.0f);
  EXPECT_FLOAT_EQ(mean(Tensor::from({3}, {2, 4, 6})).item(), 4.0f);
  EXPECT_FLOAT_EQ(phqfuse::sqrt(Tensor::from({1}, {9})).item(), 3.0f);
}

TEST(Elementwise, SiluBackwardMatchesFiniteDifference) {
  Rng rng = make_rng(7, "t");
  for (int rep = 0; rep < 20; ++rep) {
    const float x0 = std::uniform_real_distribution<float>(-2.0f, 2.0f)(rng);
    Tensor x = Tensor::scalar(x0, true);
    backward(silu(x));
    const double eps = 1e-3;
    auto f = [](double v) { return v / (1.0 + std::exp(-v)); };
    const double num = (f(x0 + eps) - f(x0 - eps)) / (2 * eps);
    EXPECT_LT(std::abs(x.grad()[0] - num) / std::max(1e-3, std::abs(num)), 1e-2);
  }
}

TEST(Elementwise, EmbeddingGathersRows) {
  Tensor table = Tensor::from({3, 2}, {0, 1, 10, 11, 20, 21}, true);
  std::vector<int> ids{2, 0, 2};
  Tensor e = embedding(table, ids);
  EXPECT_EQ(e.at(0, 1), 21.0f);
  EXPECT_EQ(e.at(1, 0), 0.0f);
  backward(sum(e));
  EXPECT_EQ(table.grad()[4], 2.0f);
  EXPECT_EQ(table.grad()[2], 0.0f);
  std::vector<int> bad{3};
  EXPECT_THROW(embedding(table, bad), RangeError);
}

TEST(Numerics, NonFiniteResultThrows) {
  Tensor a = Tensor::from({1}, {-1.0f});
  EXPECT_THROW(phqfuse::sqrt(a), NumericError);
  Tensor big = Tensor::from({1, 1}, {3e38f});
  EXPECT_THROW(scale(big, 10.0f), NumericError);
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  Tensor logits = Tensor::zeros({2, 260});
  std::vector<int> t{5, 9};
  std::vector<std::uint8_t> m{1, 1};
  EXPECT_NEAR(cross_entropy(logits, t, m).item(), std::log(260.0), 1e-5);
  std::vector<std::uint8_t> none{0, 0};
  EXPECT_THROW(cross_entropy(logits, t, none), ContractError);
}

TEST(CrossEntropy, ConfidentLogitsGiveZero) {
  Tensor logits = Tensor::full({1, 4}, -100.0f);
  logits.mutable_data()[2] = 100.0f;
  std::vector<int> t{2};
  std::vector<std::uint8_t> m{1};
  EXPECT_NEAR(cross_entropy(logits, t, m).item(), 0.0f, 1e-6);
}

TEST(CrossEntropy, MatchesPerTokenOracle) {
  Rng rng = make_rng(8, "t");
  Tensor logits = rand_matrix(6, 11, rng);
  std::vector<int> t{0, 3, 10, 7, 7, 1};
  std::vector<std::uint8_t> m{1, 0, 1, 1, 0, 1};
  double total = 0.0;
  int n = 0;
  for (int i = 0; i < 6; ++i) {
    if (!m[i]) continue;
    double den = 0.0;
    for (int j = 0; j < 11; ++j) den += std::exp(static_cast<double>(logits.at(i, j)));
    total += -std::log(std::exp(static_cast<double>(logits.at(i, t[i]))) / den);
    ++n;
  }
  EXPECT_NEAR(cross_entropy(logits, t, m).item(), total / n, 1e-6);
}

TEST(GradcheckHarness, RelativeErrorUsesFloor) {
  std::vector<double> a{1.0, 0.0}, n{1.0, 0.0};
  EXPECT_EQ(gradcheck::relative_error(a, n, 0.1), 0.0);
  std::vector<double> z{0.0}, s{1e-4};
  // tiny absolute error on a vanishing gradient stays below tolerance
  EXPECT_LT(gradcheck::relative_error(z, s, 0.1), 1e-2);
  std::vector<double> w{1.0}, r{-1.0};
  EXPECT_NEAR(gradcheck::relative_error(w, r, 0.1), 2.0, 1e-12);
}
