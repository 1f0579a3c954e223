#include "decalign/gmm.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace decalign;
using linalg::Matrix;

namespace {

// Independent dense inversion + determinant by Gauss-Jordan, test-side only.
struct DenseInverse {
  Matrix inv;
  double det;
};

DenseInverse gauss_jordan(const Matrix& a) {
  const int n = a.rows();
  Matrix m = a;
  Matrix inv = Matrix::identity(n);
  double det = 1.0;
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(m(r, col)) > std::abs(m(pivot, col))) pivot = r;
    if (pivot != col) {
      for (int c = 0; c < n; ++c) {
        std::swap(m(pivot, c), m(col, c));
        std::swap(inv(pivot, c), inv(col, c));
      }
      det = -det;
    }
    det *= m(col, col);
    double p = m(col, col);
    for (int c = 0; c < n; ++c) {
      m(col, c) /= p;
      inv(col, c) /= p;
    }
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      double f = m(r, col);
      for (int c = 0; c < n; ++c) {
        m(r, c) -= f * m(col, c);
        inv(r, c) -= f * inv(col, c);
      }
    }
  }
  return {inv, det};
}

double pdf_oracle(const std::vector<double>& x, const std::vector<double>& mu,
                  const Matrix& sigma) {
  const int d = static_cast<int>(x.size());
  auto gi = gauss_jordan(sigma);
  double quad = 0.0;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) quad += (x[i] - mu[i]) * gi.inv(i, j) * (x[j] - mu[j]);
  return std::exp(-0.5 * quad) / (std::pow(2.0 * M_PI, d / 2.0) * std::sqrt(gi.det));
}

Matrix random_spd(Rng& rng, int d) {
  Matrix b(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) b(i, j) = rng.next_gaussian();
  Matrix a = b.transposed() * b;
  for (int i = 0; i < d; ++i) a(i, i) += 0.5;
  return a;
}

GmmModel random_model(Rng& rng, int k, int d) {
  GmmModel m;
  m.components = k;
  m.weights.resize(k);
  double sum = 0.0;
  for (auto& w : m.weights) {
    w = rng.uniform(0.2, 1.0);
    sum += w;
  }
  for (auto& w : m.weights) w /= sum;
  for (int c = 0; c < k; ++c) {
    m.means.push_back(oracles::random_vec(rng, d));
    m.covariances.push_back(random_spd(rng, d));
  }
  return m;
}

Matrix random_features(Rng& rng, int n, int d, double scale = 1.0) {
  Matrix x(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) x(i, j) = scale * rng.next_gaussian();
  return x;
}

}  // namespace

TEST(LogGaussianPdf, StandardNormalAtMode) {
  EXPECT_NEAR(log_gaussian_pdf({0.0}, {0.0}, Matrix::identity(1)),
              -0.9189385332046727, 1e-10);
}

TEST(LogGaussianPdf, AtMeanOnlyNormalizer) {
  Rng rng(21);
  Matrix sigma = random_spd(rng, 3);
  auto mu = oracles::random_vec(rng, 3);
  auto gi = gauss_jordan(sigma);
  double expected = -0.5 * (std::log(gi.det) + 3.0 * std::log(2.0 * M_PI));
  EXPECT_NEAR(log_gaussian_pdf(mu, mu, sigma), expected, 1e-10);
}

TEST(LogGaussianPdf, MatchesDenseInversionOracle) {
  Rng rng(22);
  for (int trial = 0; trial < 30; ++trial) {
    Matrix sigma = random_spd(rng, 3);
    auto mu = oracles::random_vec(rng, 3);
    auto x = oracles::random_vec(rng, 3);
    EXPECT_NEAR(log_gaussian_pdf(x, mu, sigma), std::log(pdf_oracle(x, mu, sigma)), 1e-10);
  }
}

TEST(LogGaussianPdf, RejectsDimensionMismatch) {
  EXPECT_THROW(log_gaussian_pdf({0.0, 1.0}, {0.0}, Matrix::identity(2)), DimensionMismatch);
}

TEST(EStep, SingleComponentIsCertain) {
  Rng rng(23);
  Matrix x = random_features(rng, 5, 2);
  GmmModel m = random_model(rng, 1, 2);
  auto r = e_step(x, m);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(r(i, 0), 1.0);
}

TEST(EStep, SymmetricComponentsSplitEvenly) {
  GmmModel m;
  m.components = 2;
  m.weights = {0.5, 0.5};
  m.means = {{-1.0, 0.0}, {1.0, 0.0}};
  m.covariances = {Matrix::identity(2), Matrix::identity(2)};
  Matrix x(1, 2);  // equidistant from both means
  x(0, 1) = 0.7;
  auto r = e_step(x, m);
  EXPECT_NEAR(r(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(r(0, 1), 0.5, 1e-12);
}

TEST(EStep, MatchesNaiveComputation) {
  Rng rng(24);
  for (int trial = 0; trial < 20; ++trial) {
    GmmModel m = random_model(rng, 3, 2);
    Matrix x = random_features(rng, 1, 2);
    auto r = e_step(x, m);
    std::vector<double> x0 = {x(0, 0), x(0, 1)};
    double total = 0.0;
    std::vector<double> num(3);
    for (int c = 0; c < 3; ++c) {
      num[c] = m.weights[c] * pdf_oracle(x0, m.means[c], m.covariances[c]);
      total += num[c];
    }
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(r(0, c), num[c] / total, 1e-12);
  }
}

TEST(EStep, RowsAreStochastic) {
  Rng rng(25);
  GmmModel m = random_model(rng, 4, 3);
  Matrix x = random_features(rng, 40, 3, 3.0);
  auto r = e_step(x, m);
  for (int i = 0; i < 40; ++i) {
    double row = 0.0;
    for (int c = 0; c < 4; ++c) {
      EXPECT_GE(r(i, c), 0.0);
      EXPECT_LE(r(i, c), 1.0);
      row += r(i, c);
    }
    EXPECT_NEAR(row, 1.0, 1e-10);
  }
}

TEST(MStep, OneHotGivesClusterMeans) {
  Matrix x(4, 1);
  x(0, 0) = 1.0;
  x(1, 0) = 3.0;
  x(2, 0) = 10.0;
  x(3, 0) = 14.0;
  Responsibilities r{4, 2, {1, 0, 1, 0, 0, 1, 0, 1}};
  GmmModel m = m_step(x, r);
  EXPECT_NEAR(m.means[0][0], 2.0, 1e-14);
  EXPECT_NEAR(m.means[1][0], 12.0, 1e-14);
  EXPECT_NEAR(m.weights[0], 0.5, 1e-14);
}

TEST(MStep, UniformResponsibilitiesGiveGlobalMean) {
  Rng rng(26);
  Matrix x = random_features(rng, 10, 3);
  Responsibilities r{10, 2, std::vector<double>(20, 0.5)};
  GmmModel m = m_step(x, r);
  std::vector<double> mean(3, 0.0);
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 3; ++j) mean[j] += x(i, j) / 10.0;
  for (int j = 0; j < 3; ++j) {
    EXPECT_NEAR(m.means[0][j], mean[j], 1e-12);
    EXPECT_NEAR(m.means[1][j], mean[j], 1e-12);
  }
}

TEST(MStep, MatchesWeightedMomentOracle) {
  Rng rng(27);
  const int n = 8, d = 2, k = 3;
  Matrix x = random_features(rng, n, d);
  Responsibilities r{n, k, std::vector<double>(n * k)};
  for (int i = 0; i < n; ++i) {
    double row = 0.0;
    for (int c = 0; c < k; ++c) {
      r(i, c) = rng.uniform(0.05, 1.0);
      row += r(i, c);
    }
    for (int c = 0; c < k; ++c) r(i, c) /= row;
  }
  GmmModel m = m_step(x, r);
  for (int c = 0; c < k; ++c) {
    double nk = 0.0;
    for (int i = 0; i < n; ++i) nk += r(i, c);
    EXPECT_NEAR(m.weights[c], nk / n, 1e-12);
    for (int j = 0; j < d; ++j) {
      double mu = 0.0;
      for (int i = 0; i < n; ++i) mu += r(i, c) * x(i, j);
      mu /= nk;
      EXPECT_NEAR(m.means[c][j], mu, 1e-12);
      for (int j2 = 0; j2 < d; ++j2) {
        double cov = 0.0;
        for (int i = 0; i < n; ++i) {
          double mu2 = 0.0;
          for (int i2 = 0; i2 < n; ++i2) mu2 += r(i2, c) * x(i2, j2);
          mu2 /= nk;
          cov += r(i, c) * (x(i, j) - mu) * (x(i, j2) - mu2);
        }
        cov = cov / nk + (j == j2 ? kCovFloor : 0.0);
        EXPECT_NEAR(m.covariances[c](j, j2), cov, 1e-12);
      }
    }
  }
}

TEST(MStep, ThrowsOnEmptyComponent) {
  Matrix x(3, 1);
  Responsibilities r{3, 2, {1, 0, 1, 0, 1, 0}};
  EXPECT_THROW(m_step(x, r), EmptyComponent);
}

TEST(Fit, RecoversWellSeparatedClusters) {
  Rng rng(28);
  // separation = 10 sigma; sigma small enough that sample-mean noise
  // (sigma/sqrt(200)) stays well under the 0.05 recovery tolerance
  const int k = 3, per_cluster = 200, d = 2;
  const double sigma = 0.2;
  std::vector<std::vector<double>> centers = {{0.0, 0.0}, {2.0, 0.0}, {0.0, 2.0}};
  Matrix x(k * per_cluster, d);
  for (int c = 0; c < k; ++c)
    for (int i = 0; i < per_cluster; ++i)
      for (int j = 0; j < d; ++j)
        x(c * per_cluster + i, j) = centers[c][j] + sigma * rng.next_gaussian();
  GmmModel m = fit_gmm(x, k, 99);
  for (const auto& truth : centers) {
    double best = 1e300;
    for (const auto& mu : m.means) {
      double dist = std::hypot(mu[0] - truth[0], mu[1] - truth[1]);
      best = std::min(best, dist);
    }
    EXPECT_LT(best, 0.05);
  }
}

TEST(Fit, SingleComponentClosedForm) {
  Rng rng(29);
  const int n = 50, d = 2;
  Matrix x = random_features(rng, n, d, 2.0);
  GmmModel m = fit_gmm(x, 1, 3);
  std::vector<double> mean(d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) mean[j] += x(i, j) / n;
  for (int j = 0; j < d; ++j) EXPECT_NEAR(m.means[0][j], mean[j], 1e-12);
  for (int a = 0; a < d; ++a)
    for (int b = 0; b < d; ++b) {
      double cov = 0.0;
      for (int i = 0; i < n; ++i) cov += (x(i, a) - mean[a]) * (x(i, b) - mean[b]);
      cov = cov / n + (a == b ? kCovFloor : 0.0);
      EXPECT_NEAR(m.covariances[0](a, b), cov, 1e-12);
    }
  EXPECT_EQ(m.weights[0], 1.0);
}

TEST(Fit, TraceIsMonotone) {
  Rng rng(30);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix x = random_features(rng, 60, 3, 1.5);
    GmmModel m = fit_gmm(x, 3, 1000 + trial);
    ASSERT_GE(m.log_likelihood_trace.size(), 2u);
    for (size_t t = 1; t < m.log_likelihood_trace.size(); ++t)
      EXPECT_GE(m.log_likelihood_trace[t], m.log_likelihood_trace[t - 1] - 1e-8);
  }
}

TEST(Fit, DeterministicGivenSeed) {
  Rng rng(31);
  Matrix x = random_features(rng, 80, 2);
  GmmModel a = fit_gmm(x, 3, 42);
  GmmModel b = fit_gmm(x, 3, 42);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.means, b.means);
  for (int c = 0; c < 3; ++c)
    EXPECT_EQ(a.covariances[c].data(), b.covariances[c].data());
  EXPECT_EQ(a.log_likelihood_trace, b.log_likelihood_trace);
}

TEST(Fit, RejectsTooFewSamples) {
  Matrix x(2, 2);
  EXPECT_THROW(fit_gmm(x, 3, 0), TooFewSamples);
}

TEST(Fit, WeightsSumToOne) {
  Rng rng(32);
  Matrix x = random_features(rng, 50, 2);
  GmmModel m = fit_gmm(x, 4, 7);
  double sum = 0.0;
  for (double w : m.weights) {
    EXPECT_GE(w, 0.0);
    sum += w;
  }
  EXPECT_NEAR(sum, 1.0, 1e-10);
}
