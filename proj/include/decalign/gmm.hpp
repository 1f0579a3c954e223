#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "decalign/errors.hpp"
#include "decalign/linalg.hpp"
#include "decalign/rng.hpp"

namespace decalign {

/// Per-modality prototype set: mixture weights, means, covariances.
struct GmmModel {
  int components = 0;                        // K
  std::vector<double> weights;               // pi_k, sums to 1
  std::vector<std::vector<double>> means;    // K x d
  std::vector<linalg::Matrix> covariances;   // K x (d x d), SPD after flooring
  std::vector<double> log_likelihood_trace;  // one entry per EM iteration

  int dim() const { return means.empty() ? 0 : static_cast<int>(means[0].size()); }
};

/// Row-stochastic (N,K) posterior weights w_n(k).
struct Responsibilities {
  int samples = 0;
  int components = 0;
  std::vector<double> w;

  double operator()(int n, int k) const { return w[static_cast<size_t>(n) * components + k]; }
  double& operator()(int n, int k) { return w[static_cast<size_t>(n) * components + k]; }
};

constexpr double kCovFloor = 1e-6;

/// log N(x; mu, Sigma) through the Cholesky factor.
inline double log_gaussian_pdf(const std::vector<double>& x, const std::vector<double>& mu,
                               const linalg::Matrix& sigma) {
  const int d = static_cast<int>(x.size());
  if (mu.size() != x.size() || sigma.rows() != d || sigma.cols() != d)
    throw DimensionMismatch("log_gaussian_pdf: x has dim " + std::to_string(d) +
                            ", mu " + std::to_string(mu.size()) + ", sigma " +
                            std::to_string(sigma.rows()) + "x" + std::to_string(sigma.cols()));
  linalg::Cholesky ch = linalg::cholesky(sigma);
  std::vector<double> diff(d);
  for (int i = 0; i < d; ++i) diff[i] = x[i] - mu[i];
  std::vector<double> y = linalg::forward_solve(ch.lower, diff);
  double quad = 0.0;
  for (double v : y) quad += v * v;
  return -0.5 * (quad + ch.log_det + d * std::log(2.0 * M_PI));
}

namespace detail {

// Per-sample component log-joints log pi_k + log N(x_n; ...), factoring the
// Cholesky out of the sample loop.
inline std::vector<double> log_joint(const linalg::Matrix& x, const GmmModel& model) {
  const int n = x.rows(), d = x.cols(), k = model.components;
  std::vector<linalg::Cholesky> chols;
  chols.reserve(k);
  for (int c = 0; c < k; ++c) chols.push_back(linalg::cholesky(model.covariances[c]));

  std::vector<double> lj(static_cast<size_t>(n) * k);
  std::vector<double> diff(d);
  for (int c = 0; c < k; ++c) {
    double log_pi = std::log(std::max(model.weights[c], 1e-300));
    double base = -0.5 * (chols[c].log_det + d * std::log(2.0 * M_PI));
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) diff[j] = x(i, j) - model.means[c][j];
      auto y = linalg::forward_solve(chols[c].lower, diff);
      double quad = 0.0;
      for (double v : y) quad += v * v;
      lj[static_cast<size_t>(i) * k + c] = log_pi + base - 0.5 * quad;
    }
  }
  return lj;
}

inline double loglik_from_joint(const std::vector<double>& lj, int n, int k) {
  double total = 0.0;
  std::vector<double> row(k);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < k; ++c) row[c] = lj[static_cast<size_t>(i) * k + c];
    total += linalg::logsumexp(row);
  }
  return total;
}

inline Responsibilities resp_from_joint(const std::vector<double>& lj, int n, int k) {
  Responsibilities r{n, k, std::vector<double>(static_cast<size_t>(n) * k)};
  std::vector<double> row(k);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < k; ++c) row[c] = lj[static_cast<size_t>(i) * k + c];
    double lse = linalg::logsumexp(row);
    for (int c = 0; c < k; ++c) r(i, c) = std::exp(row[c] - lse);
  }
  return r;
}

}  // namespace detail

/// Posterior responsibilities, computed in log space.
inline Responsibilities e_step(const linalg::Matrix& x, const GmmModel& model) {
  return detail::resp_from_joint(detail::log_joint(x, model), x.rows(), model.components);
}

/// Weighted-moment update. Covariances get kCovFloor added to the diagonal,
/// keeping them PD for tight clusters and the downstream matrix square root.
inline GmmModel m_step(const linalg::Matrix& x, const Responsibilities& resp,
                       double cov_floor = kCovFloor) {
  const int n = x.rows(), d = x.cols(), k = resp.components;
  if (resp.samples != n)
    throw DimensionMismatch("m_step: responsibilities for " + std::to_string(resp.samples) +
                            " samples, features have " + std::to_string(n));
  const double resp_floor = 1e-8 * n;

  GmmModel out;
  out.components = k;
  out.weights.resize(k);
  out.means.assign(k, std::vector<double>(d, 0.0));
  out.covariances.assign(k, linalg::Matrix(d, d));

  for (int c = 0; c < k; ++c) {
    double nk = 0.0;
    for (int i = 0; i < n; ++i) nk += resp(i, c);
    if (nk < resp_floor)
      throw EmptyComponent("m_step: component " + std::to_string(c) +
                           " has effective weight " + std::to_string(nk));
    out.weights[c] = nk / n;
    auto& mu = out.means[c];
    for (int i = 0; i < n; ++i) {
      double wi = resp(i, c);
      for (int j = 0; j < d; ++j) mu[j] += wi * x(i, j);
    }
    for (double& v : mu) v /= nk;
    auto& cov = out.covariances[c];
    std::vector<double> diff(d);
    for (int i = 0; i < n; ++i) {
      double wi = resp(i, c);
      for (int j = 0; j < d; ++j) diff[j] = x(i, j) - mu[j];
      for (int a = 0; a < d; ++a)
        for (int b = a; b < d; ++b) cov(a, b) += wi * diff[a] * diff[b];
    }
    for (int a = 0; a < d; ++a)
      for (int b = a; b < d; ++b) {
        cov(a, b) /= nk;
        cov(b, a) = cov(a, b);
      }
    for (int a = 0; a < d; ++a) cov(a, a) += cov_floor;
  }
  return out;
}

namespace detail {

inline linalg::Matrix global_covariance(const linalg::Matrix& x, double cov_floor) {
  const int n = x.rows(), d = x.cols();
  std::vector<double> mean(d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) mean[j] += x(i, j);
  for (double& v : mean) v /= n;
  linalg::Matrix cov(d, d);
  std::vector<double> diff(d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) diff[j] = x(i, j) - mean[j];
    for (int a = 0; a < d; ++a)
      for (int b = a; b < d; ++b) cov(a, b) += diff[a] * diff[b];
  }
  for (int a = 0; a < d; ++a)
    for (int b = a; b < d; ++b) {
      cov(a, b) /= n;
      cov(b, a) = cov(a, b);
    }
  for (int a = 0; a < d; ++a) cov(a, a) += cov_floor;
  return cov;
}

// k-means++ style seeding: spread initial means across the data.
inline std::vector<int> seed_centers(const linalg::Matrix& x, int k, Rng& rng) {
  const int n = x.rows(), d = x.cols();
  std::vector<int> centers;
  centers.push_back(static_cast<int>(rng.next_below(n)));
  std::vector<double> dist2(n, std::numeric_limits<double>::infinity());
  while (static_cast<int>(centers.size()) < k) {
    int last = centers.back();
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j < d; ++j) {
        double diff = x(i, j) - x(last, j);
        s += diff * diff;
      }
      dist2[i] = std::min(dist2[i], s);
      total += dist2[i];
    }
    int pick = 0;
    if (total > 0.0) {
      double u = rng.next_double() * total;
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        acc += dist2[i];
        if (acc >= u) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<int>(rng.next_below(n));
    }
    centers.push_back(pick);
  }
  return centers;
}

}  // namespace detail

/// EM fit, deterministic given the seed. The trace restarts if a dying
/// component has to be re-seeded, so recorded runs are monotone.
inline GmmModel fit_gmm(const linalg::Matrix& x, int k, uint64_t seed, int max_iters = 100,
                        double tol = 1e-6) {
  const int n = x.rows(), d = x.cols();
  if (k < 1) throw InvalidSpec("fit_gmm: K must be >= 1");
  if (n < k)
    throw TooFewSamples("fit_gmm: " + std::to_string(n) + " samples for K=" + std::to_string(k));

  Rng rng(seed);
  linalg::Matrix global_cov = detail::global_covariance(x, kCovFloor);

  GmmModel model;
  model.components = k;
  model.weights.assign(k, 1.0 / k);
  model.means.assign(k, std::vector<double>(d));
  model.covariances.assign(k, global_cov);
  auto centers = detail::seed_centers(x, k, rng);
  for (int c = 0; c < k; ++c)
    for (int j = 0; j < d; ++j) model.means[c][j] = x(centers[c], j);

  double prev = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < max_iters; ++iter) {
    auto lj = detail::log_joint(x, model);
    double ll = detail::loglik_from_joint(lj, n, k);
    model.log_likelihood_trace.push_back(ll);
    if (ll - prev < tol && iter > 0) break;
    prev = ll;

    auto resp = detail::resp_from_joint(lj, n, k);
    bool reseeded = false;
    const double resp_floor = 1e-8 * n;
    for (int c = 0; c < k; ++c) {
      double nk = 0.0;
      for (int i = 0; i < n; ++i) nk += resp(i, c);
      if (nk < resp_floor) {
        // park the dying component on the worst-explained sample
        int worst = 0;
        double worst_density = std::numeric_limits<double>::infinity();
        std::vector<double> row(k);
        for (int i = 0; i < n; ++i) {
          for (int cc = 0; cc < k; ++cc) row[cc] = lj[static_cast<size_t>(i) * k + cc];
          double dens = linalg::logsumexp(row);
          if (dens < worst_density) {
            worst_density = dens;
            worst = i;
          }
        }
        for (int j = 0; j < d; ++j) model.means[c][j] = x(worst, j);
        model.covariances[c] = global_cov;
        model.weights[c] = 1.0 / k;
        double wsum = 0.0;
        for (double wv : model.weights) wsum += wv;
        for (double& wv : model.weights) wv /= wsum;
        reseeded = true;
      }
    }
    if (reseeded) {
      model.log_likelihood_trace.clear();
      prev = -std::numeric_limits<double>::infinity();
      continue;
    }
    GmmModel next = m_step(x, resp);
    model.weights = std::move(next.weights);
    model.means = std::move(next.means);
    model.covariances = std::move(next.covariances);
  }
  return model;
}

}  // namespace decalign
