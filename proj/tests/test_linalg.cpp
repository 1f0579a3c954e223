#include "decalign/linalg.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "decalign/rng.hpp"
#include "oracles.hpp"

using namespace decalign;
using linalg::Matrix;

namespace {

Matrix random_symmetric(Rng& rng, int n) {
  Matrix a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) a(i, j) = a(j, i) = rng.next_gaussian();
  return a;
}

Matrix random_psd(Rng& rng, int n) {
  Matrix b(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) b(i, j) = rng.next_gaussian();
  return b.transposed() * b;
}

Matrix random_pd(Rng& rng, int n) {
  Matrix a = random_psd(rng, n);
  for (int i = 0; i < n; ++i) a(i, i) += 0.5;
  return a;
}

double reconstruction_rel_err(const Matrix& a, const linalg::SymEig& eig) {
  const int n = a.rows();
  Matrix recon(n, n);
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        recon(i, j) += eig.eigenvalues[k] * eig.eigenvectors(i, k) * eig.eigenvectors(j, k);
  return (recon - a).frobenius_norm() / std::max(a.frobenius_norm(), 1e-300);
}

}  // namespace

TEST(SymEig, Identity) {
  auto eig = linalg::sym_eig(Matrix::identity(3));
  for (double l : eig.eigenvalues) EXPECT_NEAR(l, 1.0, 1e-12);
}

TEST(SymEig, Diagonal) {
  Matrix a(2, 2);
  a(0, 0) = 4.0;
  a(1, 1) = 1.0;
  auto eig = linalg::sym_eig(a);
  EXPECT_NEAR(eig.eigenvalues[0], 4.0, 1e-12);
  EXPECT_NEAR(eig.eigenvalues[1], 1.0, 1e-12);
  // eigenvectors are +-standard basis
  EXPECT_NEAR(std::abs(eig.eigenvectors(0, 0)), 1.0, 1e-12);
  EXPECT_NEAR(std::abs(eig.eigenvectors(1, 1)), 1.0, 1e-12);
}

TEST(SymEig, RandomReconstructionAndOrthonormality) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix a = random_symmetric(rng, 5);
    auto eig = linalg::sym_eig(a);
    EXPECT_LT(reconstruction_rel_err(a, eig), 1e-8);
    Matrix vtv = eig.eigenvectors.transposed() * eig.eigenvectors;
    EXPECT_LT((vtv - Matrix::identity(5)).frobenius_norm(), 1e-8);
    for (size_t i = 1; i < eig.eigenvalues.size(); ++i)
      EXPECT_GE(eig.eigenvalues[i - 1], eig.eigenvalues[i]);
  }
}

TEST(SymEig, RejectsNonSymmetric) {
  Matrix a(2, 2);
  a(0, 1) = 1.0;
  EXPECT_THROW(linalg::sym_eig(a), NonSymmetric);
  Matrix rect(2, 3);
  EXPECT_THROW(linalg::sym_eig(rect), NonSymmetric);
}

TEST(SqrtmPsd, Identity) {
  Matrix s = linalg::sqrtm_psd(Matrix::identity(4));
  EXPECT_LT((s - Matrix::identity(4)).frobenius_norm(), 1e-12);
}

TEST(SqrtmPsd, Diagonal) {
  Matrix a(2, 2);
  a(0, 0) = 4.0;
  a(1, 1) = 9.0;
  Matrix s = linalg::sqrtm_psd(a);
  EXPECT_NEAR(s(0, 0), 2.0, 1e-12);
  EXPECT_NEAR(s(1, 1), 3.0, 1e-12);
  EXPECT_NEAR(s(0, 1), 0.0, 1e-12);
}

TEST(SqrtmPsd, SquaringOracle) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix a = random_psd(rng, 4);
    Matrix s = linalg::sqrtm_psd(a);
    EXPECT_LT(((s * s) - a).frobenius_norm() / a.frobenius_norm(), 1e-8);
    EXPECT_LT(s.max_asymmetry(), 1e-9);
  }
}

TEST(SqrtmPsd, CommutesWithInput) {
  Rng rng(13);
  Matrix a = random_psd(rng, 5);
  Matrix s = linalg::sqrtm_psd(a);
  EXPECT_LT(((s * a) - (a * s)).frobenius_norm(), 1e-8);
}

TEST(SqrtmPsd, RejectsIndefinite) {
  Matrix a(2, 2);
  a(0, 0) = 1.0;
  a(1, 1) = -1.0;
  EXPECT_THROW(linalg::sqrtm_psd(a), IndefiniteInput);
}

TEST(SqrtmPsd, ClampsRoundoffNegatives) {
  Matrix a(2, 2);
  a(0, 0) = 1.0;
  a(1, 1) = -5e-11;  // within the clamp band
  Matrix s = linalg::sqrtm_psd(a);
  EXPECT_NEAR(s(1, 1), 0.0, 1e-5);
}

TEST(Cholesky, Identity) {
  auto ch = linalg::cholesky(Matrix::identity(3));
  EXPECT_LT((ch.lower - Matrix::identity(3)).frobenius_norm(), 1e-14);
  EXPECT_NEAR(ch.log_det, 0.0, 1e-14);
}

TEST(Cholesky, Diagonal) {
  Matrix a(2, 2);
  a(0, 0) = 4.0;
  a(1, 1) = 1.0;
  auto ch = linalg::cholesky(a);
  EXPECT_NEAR(ch.lower(0, 0), 2.0, 1e-14);
  EXPECT_NEAR(ch.lower(1, 1), 1.0, 1e-14);
  EXPECT_NEAR(ch.lower(1, 0), 0.0, 1e-14);
}

TEST(Cholesky, ReconstructionOracle) {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix a = random_pd(rng, 4);
    auto ch = linalg::cholesky(a);
    Matrix recon = ch.lower * ch.lower.transposed();
    EXPECT_LT((recon - a).frobenius_norm() / a.frobenius_norm(), 1e-10);
    EXPECT_EQ(ch.jitter, 0.0);
  }
}

TEST(Cholesky, LogDetMatchesEigenvalues) {
  Rng rng(15);
  Matrix a = random_pd(rng, 5);
  auto ch = linalg::cholesky(a);
  auto eig = linalg::sym_eig(a);
  double sum_log = 0.0;
  for (double l : eig.eigenvalues) sum_log += std::log(l);
  EXPECT_NEAR(ch.log_det, sum_log, 1e-8);
}

TEST(Cholesky, JitterRescuesNearSingular) {
  // rank-1 matrix: singular, rescued by the diagonal ladder
  Matrix a(2, 2);
  a(0, 0) = 1.0;
  a(0, 1) = a(1, 0) = 1.0;
  a(1, 1) = 1.0;
  auto ch = linalg::cholesky(a);
  EXPECT_GT(ch.jitter, 0.0);
}

TEST(Cholesky, RejectsIndefinite) {
  Matrix a(2, 2);
  a(0, 0) = 1.0;
  a(1, 1) = -1.0;
  EXPECT_THROW(linalg::cholesky(a), NotPositiveDefinite);
}

TEST(LogSumExp, Basics) {
  EXPECT_NEAR(linalg::logsumexp({0.0, 0.0}), std::log(2.0), 1e-15);
  EXPECT_NEAR(linalg::logsumexp({1000.0, 1000.0}), 1000.0 + std::log(2.0), 1e-12);
  EXPECT_THROW(linalg::logsumexp({}), EmptyInput);
  double ninf = -std::numeric_limits<double>::infinity();
  EXPECT_EQ(linalg::logsumexp({ninf, ninf}), ninf);
}

TEST(LogSumExp, MatchesNaiveAtSmallMagnitudes) {
  Rng rng(16);
  for (int trial = 0; trial < 50; ++trial) {
    auto v = oracles::random_vec(rng, 10, 2.0);
    double naive = 0.0;
    for (double x : v) naive += std::exp(x);
    EXPECT_NEAR(linalg::logsumexp(v), std::log(naive), 1e-12);
  }
}

TEST(LogSumExp, ShiftInvariance) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    auto v = oracles::random_vec(rng, 8, 3.0);
    double c = rng.uniform(-5.0, 5.0);
    auto shifted = v;
    for (auto& x : shifted) x += c;
    EXPECT_NEAR(linalg::logsumexp(shifted), linalg::logsumexp(v) + c, 1e-12);
  }
}
