#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>

#include "gradcheck_cases.hpp"
#include "tcsmae/adam.hpp"
#include "tcsmae/imaging.hpp"
#include "tcsmae/params.hpp"

using namespace tcsmae;
using ad::Tensor;

TEST(Ops, SimpleValues) {
  EXPECT_EQ(ad::sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  EXPECT_EQ(ad::mean(Tensor::full({4}, 1.0)).item(), 1.0);
  const Tensor s = ad::softmax_channel(Tensor::constant({1, 3, 1, 2}, {1, 2, 3, 4, 5, 6}));
  EXPECT_NEAR(s[0] + s[2] + s[4], 1.0, 1e-12);
  EXPECT_NEAR(s[1] + s[3] + s[5], 1.0, 1e-12);
}

TEST(Ops, ShapeErrors) {
  EXPECT_THROW(Tensor::zeros({2, 3}) + Tensor::zeros({3, 2}), InvalidArgument);
  EXPECT_THROW(Tensor::constant({2}, {1.0}), InvalidArgument);
  EXPECT_THROW(ad::conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor(), 1, 1), InvalidArgument);
  EXPECT_THROW(ad::reshape(Tensor::zeros({2, 3}), {4}), InvalidArgument);
  EXPECT_THROW(ad::matmul_nt(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})), InvalidArgument);
}

TEST(Ops, DivisionByTinyMagnitudeRejected) {
  EXPECT_THROW(Tensor::full({2}, 1.0) / Tensor::full({2}, 0.0), InvalidArgument);
  EXPECT_THROW(Tensor::full({2}, 1.0) / 1e-14, InvalidArgument);
}

TEST(Ops, NonFiniteForwardIsLocated) {
  try {
    ad::log(Tensor::full({2}, -1.0));
    FAIL();
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
  }
  EXPECT_THROW(ad::exp(Tensor::full({1}, 1000.0)), NonFiniteError);
}

TEST(Ops, ZeroNormRowRejected) {
  EXPECT_THROW(ad::l2_normalize_rows(Tensor::zeros({2, 3})), InvalidArgument);
}

TEST(Ops, ConvWithSobelKernelMatchesImagingGx) {
  // Replicate-pad the step image by hand so zero-padded conv equals the
  // replicate-border Sobel response everywhere.
  Grid<double> step(5, 5, 0.0);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 3; c < 5; ++c) step(r, c) = 255.0;
  std::vector<double> padded(49);
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < 7; ++c)
      padded[static_cast<std::size_t>(r * 7 + c)] =
          step(static_cast<std::size_t>(std::clamp(r - 1, 0, 4)), static_cast<std::size_t>(std::clamp(c - 1, 0, 4)));
  std::vector<double> k;
  for (const auto& row : sobel::kX)
    for (double v : row) k.push_back(v);
  const Tensor gx = ad::conv2d(Tensor::constant({1, 1, 7, 7}, padded), Tensor::constant({1, 1, 3, 3}, k), Tensor(), 1, 0);
  const Grid<double> ref = sobel::filter3x3(step, sobel::kX);
  ASSERT_EQ(gx.numel(), 25u);
  for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(gx[i], ref[i]);
  EXPECT_EQ(gx[2], 4.0 * 255.0);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::parameter({3}, {1, -2, 5});
  ad::backward(ad::sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, MeanOfSquares) {
  Tensor x = Tensor::parameter({2}, {1, 2});
  ad::backward(ad::mean(x * x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 2.0);
}

TEST(Backward, AccumulatesUntilCleared) {
  Tensor x = Tensor::parameter({2}, {1, 2});
  ad::backward(ad::sum(x));
  ad::backward(ad::sum(x));
  EXPECT_EQ(x.grad()[0], 2.0);
  x.zero_grad();
  ad::backward(ad::sum(x));
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Backward, SharedSubgraphAndReuse) {
  Tensor x = Tensor::parameter({1}, {3.0});
  const Tensor y = x * x;
  ad::backward(ad::sum(y * y + y));  // x^4 + x^2 -> 4x^3 + 2x
  EXPECT_DOUBLE_EQ(x.grad()[0], 4 * 27.0 + 6.0);
}

TEST(Backward, RejectsNonScalar) {
  Tensor x = Tensor::parameter({2}, {1, 2});
  EXPECT_THROW(ad::backward(x * 2.0), InvalidArgument);
}

TEST(Backward, DeterministicAcrossThreadCounts) {
  Rng rng(3);
  std::vector<double> xv = oracle::uniform_values(rng, 4 * 3 * 8 * 8, -1, 1), wv = oracle::uniform_values(rng, 5 * 3 * 9, -1, 1);
  auto run = [&](const char* threads) {
    setenv("TCSMAE_THREADS", threads, 1);
    Tensor x = Tensor::parameter({4, 3, 8, 8}, xv), w = Tensor::parameter({5, 3, 3, 3}, wv);
    const Tensor y = ad::conv2d(x, w, Tensor(), 2, 1);
    ad::backward(ad::sum(y * y));
    std::vector<double> out(y.values().begin(), y.values().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  const auto a = run("1"), b = run("3");
  unsetenv("TCSMAE_THREADS");
  EXPECT_EQ(a, b);
}

class OpGradcheck : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradcheck, TenRandomCases) {
  const auto cases = gradcases::op_cases();
  const auto& c = cases[GetParam()];
  Rng rng(derive_seed(1234, {GetParam()}));
  for (int i = 0; i < 10; ++i) {
    const auto r = c.run(rng);
    EXPECT_GT(r.checked, 0u);
    EXPECT_LT(r.max_rel_error, 1e-4) << c.name << " case " << i << ": input " << r.worst_input << "[" << r.worst_index
                                     << "] analytic " << r.worst_analytic << " numeric " << r.worst_numeric;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradcheck, ::testing::Range<std::size_t>(0, gradcases::op_cases().size()),
                         [](const auto& info) { return gradcases::op_cases()[info.param].name; });

TEST(AdamTest, ZeroGradientLeavesParameters) {
  ParameterSet ps;
  Tensor w = Tensor::parameter({3}, {1, 2, 3});
  ps.add("w", w);
  Adam opt(ps, {1e-2});
  opt.step();
  EXPECT_EQ(std::vector<double>(w.values().begin(), w.values().end()), (std::vector<double>{1, 2, 3}));
}

TEST(AdamTest, SingleStepClosedForm) {
  for (double g : {0.3, -2.0, 1e-3}) {
    ParameterSet ps;
    Tensor w = Tensor::parameter({}, {0.5});
    ps.add("w", w);
    const AdamOptions o{1e-3};
    Adam opt(ps, o);
    ad::backward(w * g);
    opt.step();
    // m_hat = g, v_hat = g^2 after bias correction.
    const double expect = 0.5 - o.lr * g / (std::abs(g) + o.eps);
    EXPECT_NEAR(w.item(), expect, 1e-15);
    EXPECT_NEAR(0.5 - w.item(), o.lr * (g > 0 ? 1 : -1), 1e-7);
  }
}

TEST(AdamTest, MultiStepMatchesReference) {
  ParameterSet ps;
  Tensor w = Tensor::parameter({2}, {1.0, -1.0});
  ps.add("w", w);
  Adam opt(ps, {0.05});
  double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {1.0, -1.0};
  for (int t = 1; t <= 5; ++t) {
    opt.zero_grad();
    ad::backward(ad::sum(w * w * w));
    for (int i = 0; i < 2; ++i) {
      const double g = 3 * ref[i] * ref[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      ref[i] -= 0.05 * (m[i] / (1 - std::pow(0.9, t))) / (std::sqrt(v[i] / (1 - std::pow(0.999, t))) + 1e-8);
    }
    opt.step();
    EXPECT_NEAR(w[0], ref[0], 1e-14);
    EXPECT_NEAR(w[1], ref[1], 1e-14);
  }
}

TEST(AdamTest, IdenticalSetsStayIdentical) {
  auto make = [] {
    ParameterSet ps;
    ps.add("a", Tensor::parameter({2}, {0.1, 0.2}));
    return ps;
  };
  ParameterSet p1 = make(), p2 = make();
  Adam o1(p1), o2(p2);
  for (auto* ps : {&p1, &p2}) ad::backward(ad::sum(ad::exp(ps->find("a")->tensor)));
  o1.step();
  o2.step();
  EXPECT_EQ(p1.find("a")->tensor.values()[0], p2.find("a")->tensor.values()[0]);
  EXPECT_EQ(p1.find("a")->tensor.values()[1], p2.find("a")->tensor.values()[1]);
}

TEST(AdamTest, NonFiniteGradientNamesParameterAndLeavesValues) {
  ParameterSet ps;
  Tensor a = Tensor::parameter({1}, {1.0});
  Tensor b = Tensor::parameter({1}, {2.0});
  ps.add("alpha", a);
  ps.add("beta.weight", b);
  Adam opt(ps);
  ad::backward(ad::sum(a + b));
  b.node()->grad[0] = std::nan("");
  try {
    opt.step();
    FAIL();
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("beta.weight"), std::string::npos);
  }
  EXPECT_EQ(a.item(), 1.0);
  EXPECT_EQ(opt.step_count(), 0u);
}

TEST(Params, RejectsDuplicatesAndNonLeaves) {
  ParameterSet ps;
  Tensor a = Tensor::parameter({1}, {1.0});
  ps.add("a", a);
  EXPECT_THROW(ps.add("a", Tensor::parameter({1}, {1.0})), InvalidArgument);
  EXPECT_THROW(ps.add("b", a * 2.0), InvalidArgument);
  EXPECT_THROW(ps.add("c", Tensor::scalar(1.0)), InvalidArgument);
}
