#include "decalign/decouple.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace decalign;
using ad::Shape;
using ad::Tape;
using ad::Tensor;

namespace {

// Direct per-row cosine loop, the oracle for the rowwise interpretation.
double cosine_loss_oracle(const std::vector<std::vector<double>>& uni,
                          const std::vector<std::vector<double>>& com, int n, int d,
                          bool squared) {
  double total = 0.0;
  for (size_t m = 0; m < uni.size(); ++m) {
    double block = 0.0;
    for (int i = 0; i < n; ++i) {
      double dot = 0.0, nu = 0.0, nv = 0.0;
      for (int j = 0; j < d; ++j) {
        double a = uni[m][i * d + j], b = com[m][i * d + j];
        dot += a * b;
        nu += a * a;
        nv += b * b;
      }
      nu = std::sqrt(nu);
      nv = std::sqrt(nv);
      if (nu < 1e-12 || nv < 1e-12) continue;
      double c = dot / (nu * nv);
      block += squared ? c * c : c;
    }
    total += block / n;
  }
  return total;
}

DecoupledFeatures make_feats(const std::vector<std::vector<double>>& uni,
                             const std::vector<std::vector<double>>& com, int n, int d,
                             Tape* tape = nullptr) {
  DecoupledFeatures f;
  for (size_t m = 0; m < uni.size(); ++m) {
    if (tape) {
      f.unique.push_back(tape->leaf(Shape{n, d}, uni[m]));
      f.common.push_back(tape->leaf(Shape{n, d}, com[m]));
    } else {
      f.unique.emplace_back(Shape{n, d}, uni[m]);
      f.common.emplace_back(Shape{n, d}, com[m]);
    }
  }
  return f;
}

}  // namespace

TEST(Ldec, OrthogonalRowsGiveZero) {
  std::vector<std::vector<double>> uni = {{1.0, 0.0}}, com = {{0.0, 1.0}};
  auto f = make_feats(uni, com, 1, 2);
  EXPECT_NEAR(l_dec(f, DecoupleMode::Squared).value(), 0.0, 1e-15);
  EXPECT_NEAR(l_dec(f, DecoupleMode::PaperLiteral).value(), 0.0, 1e-15);
}

TEST(Ldec, IdenticalRowsGiveM) {
  const int m_count = 3;
  std::vector<std::vector<double>> uni(m_count, {0.3, -0.4, 1.1}), com = uni;
  auto f = make_feats(uni, com, 1, 3);
  EXPECT_NEAR(l_dec(f, DecoupleMode::Squared).value(), m_count, 1e-12);
  EXPECT_NEAR(l_dec(f, DecoupleMode::PaperLiteral).value(), m_count, 1e-12);
}

TEST(Ldec, MatchesLoopOracle) {
  Rng rng(61);
  const int n = 3, d = 4, m_count = 2;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> uni, com;
    for (int m = 0; m < m_count; ++m) {
      uni.push_back(oracles::random_vec(rng, n * d));
      com.push_back(oracles::random_vec(rng, n * d));
    }
    auto f = make_feats(uni, com, n, d);
    EXPECT_NEAR(l_dec(f, DecoupleMode::Squared).value(),
                cosine_loss_oracle(uni, com, n, d, true), 1e-12);
    EXPECT_NEAR(l_dec(f, DecoupleMode::PaperLiteral).value(),
                cosine_loss_oracle(uni, com, n, d, false), 1e-12);
  }
}

TEST(Ldec, BoundsHold) {
  Rng rng(62);
  const int n = 4, d = 3, m_count = 3;
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::vector<double>> uni, com;
    for (int m = 0; m < m_count; ++m) {
      uni.push_back(oracles::random_vec(rng, n * d));
      com.push_back(oracles::random_vec(rng, n * d));
    }
    auto f = make_feats(uni, com, n, d);
    double sq = l_dec(f, DecoupleMode::Squared).value();
    double lit = l_dec(f, DecoupleMode::PaperLiteral).value();
    EXPECT_GE(sq, 0.0);
    EXPECT_LE(sq, m_count + 1e-12);
    EXPECT_GE(lit, -m_count - 1e-12);
    EXPECT_LE(lit, m_count + 1e-12);
  }
}

TEST(Ldec, PositiveScaleInvariance) {
  Rng rng(63);
  const int n = 3, d = 4;
  std::vector<std::vector<double>> uni = {oracles::random_vec(rng, n * d)};
  std::vector<std::vector<double>> com = {oracles::random_vec(rng, n * d)};
  auto base = l_dec(make_feats(uni, com, n, d), DecoupleMode::Squared).value();
  // scale one row of the unique block by a positive factor
  auto scaled = uni;
  for (int j = 0; j < d; ++j) scaled[0][1 * d + j] *= 7.3;
  auto after = l_dec(make_feats(scaled, com, n, d), DecoupleMode::Squared).value();
  EXPECT_NEAR(base, after, 1e-10);
}

TEST(Ldec, ZeroRowsAreMaskedAndCounted) {
  std::vector<std::vector<double>> uni = {{0.0, 0.0, 1.0, 2.0}};
  std::vector<std::vector<double>> com = {{1.0, 1.0, 1.0, 2.0}};
  int zero_rows = -1;
  auto f = make_feats(uni, com, 2, 2);
  double v = l_dec(f, DecoupleMode::Squared, DecoupleGranularity::Rowwise, &zero_rows).value();
  EXPECT_EQ(zero_rows, 1);
  EXPECT_NEAR(v, 0.5, 1e-12);  // only the live (identical) row contributes 1/N
}

TEST(Ldec, FlattenTreatsBlockAsOneVector) {
  std::vector<std::vector<double>> uni = {{1.0, 0.0, 0.0, 1.0}};
  std::vector<std::vector<double>> com = {{0.0, 1.0, -1.0, 0.0}};
  auto f = make_feats(uni, com, 2, 2);
  // flattened vectors are orthogonal even though rows are not
  EXPECT_NEAR(l_dec(f, DecoupleMode::Squared, DecoupleGranularity::Flatten).value(), 0.0, 1e-15);
}

TEST(Ldec, GradientMatchesFiniteDifferences) {
  Rng rng(64);
  const int n = 3, d = 3;
  auto com_vals = oracles::random_vec(rng, n * d);
  auto eval = [&](const std::vector<double>& x, DecoupleMode mode) {
    Tape tape;
    DecoupledFeatures f;
    f.unique.push_back(tape.leaf(Shape{n, d}, x));
    f.common.emplace_back(Shape{n, d}, com_vals);
    return l_dec(f, mode);
  };
  for (auto mode : {DecoupleMode::Squared, DecoupleMode::PaperLiteral}) {
    auto x = oracles::random_vec(rng, n * d);
    Tape tape;
    DecoupledFeatures f;
    f.unique.push_back(tape.leaf(Shape{n, d}, x));
    f.common.emplace_back(Shape{n, d}, com_vals);
    Tensor loss = l_dec(f, mode);
    tape.backward(loss);
    auto check = oracles::fd_compare(
        [&](const std::vector<double>& v) { return eval(v, mode).value(); }, x,
        f.unique[0].grad());
    EXPECT_LT(check.max_rel_err, 1e-4);
  }
}

TEST(Ldec, MinimizingSquaredModeDrivesOrthogonality) {
  // two free 2-vectors under gradient descent: |cos| < 0.01 within 500 steps
  std::vector<double> u = {1.0, 0.4}, v = {0.8, 0.6};
  const double lr = 0.1;
  for (int step = 0; step < 500; ++step) {
    Tape tape;
    DecoupledFeatures f;
    f.unique.push_back(tape.leaf(Shape{1, 2}, u));
    f.common.push_back(tape.leaf(Shape{1, 2}, v));
    Tensor loss = l_dec(f, DecoupleMode::Squared);
    tape.backward(loss);
    for (int i = 0; i < 2; ++i) {
      u[i] -= lr * f.unique[0].grad()[i];
      v[i] -= lr * f.common[0].grad()[i];
    }
  }
  double dot = u[0] * v[0] + u[1] * v[1];
  double cos = dot / (std::hypot(u[0], u[1]) * std::hypot(v[0], v[1]));
  EXPECT_LT(std::abs(cos), 0.01);
}

TEST(Ldec, RejectsMismatchedBlocks) {
  DecoupledFeatures f;
  f.unique.emplace_back(Shape{2, 2}, std::vector<double>(4, 1.0));
  f.common.emplace_back(Shape{2, 3}, std::vector<double>(6, 1.0));
  EXPECT_THROW(l_dec(f), ShapeMismatch);
}
