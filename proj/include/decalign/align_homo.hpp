#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "decalign/errors.hpp"
#include "decalign/tensor.hpp"

namespace decalign {

/// Differentiable latent moment statistics of an (N, d) feature block:
/// mean, (biased) covariance, and elementwise skewness stabilized by eps.
struct MomentStats {
  ad::Tensor mean;  // (d)
  ad::Tensor cov;   // (d, d)
  ad::Tensor skew;  // (d)
  double eps = 1e-6;
};

inline MomentStats moments(const ad::Tensor& f, double eps = 1e-6) {
  if (f.rank() != 2)
    throw ShapeMismatch("moments: expected (N,d), got " + ad::shape_str(f.shape()));
  const int n = f.shape()[0], d = f.shape()[1];
  if (n < 2) throw TooFewSamples("moments: need at least 2 samples, got " + std::to_string(n));

  MomentStats out;
  out.eps = eps;
  out.mean = ad::mean(f, 0);
  ad::Tensor centered = ad::sub(f, ad::tile_rows(out.mean, n));
  out.cov = ad::scale(ad::matmul(ad::transpose(centered), centered), 1.0 / n);
  ad::Tensor var = ad::mean(ad::mul(centered, centered), 0);
  ad::Tensor denom = ad::add(ad::power(var, 0.5), ad::Tensor::full(ad::Shape{d}, eps));
  ad::Tensor z = ad::mul(centered, ad::power(ad::tile_rows(denom, n), -1.0));
  out.skew = ad::mean(ad::power(z, 3.0), 0);
  return out;
}

/// Latent semantic alignment loss: squared moment gaps over strict modality
/// pairs, normalized by M(M-1) exactly as printed.
inline ad::Tensor l_sem(const std::vector<MomentStats>& stats) {
  const int m = static_cast<int>(stats.size());
  if (m < 2) throw MismatchedDims("l_sem: need at least 2 modalities, got " + std::to_string(m));
  for (const auto& s : stats)
    if (s.mean.shape() != stats[0].mean.shape())
      throw MismatchedDims("l_sem: moment dims " + ad::shape_str(s.mean.shape()) + " vs " +
                           ad::shape_str(stats[0].mean.shape()));

  ad::Tensor total = ad::Tensor::scalar(0.0);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      ad::Tensor term = ad::sq_frobenius(ad::sub(stats[i].mean, stats[j].mean));
      term = ad::add(term, ad::sq_frobenius(ad::sub(stats[i].cov, stats[j].cov)));
      term = ad::add(term, ad::sq_frobenius(ad::sub(stats[i].skew, stats[j].skew)));
      total = ad::add(total, term);
    }
  return ad::scale(total, 1.0 / (static_cast<double>(m) * (m - 1)));
}

inline double gaussian_kernel(const std::vector<double>& x, const std::vector<double>& y,
                              double sigma) {
  if (sigma <= 0.0)
    throw NonPositiveBandwidth("gaussian_kernel: sigma = " + std::to_string(sigma));
  if (x.size() != y.size())
    throw MismatchedDims("gaussian_kernel: dims " + std::to_string(x.size()) + " vs " +
                         std::to_string(y.size()));
  double d2 = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    double diff = x[i] - y[i];
    d2 += diff * diff;
  }
  return std::exp(-d2 / (2.0 * sigma * sigma));
}

enum class MmdEstimator { Biased, Unbiased };

struct KernelConfig {
  double bandwidth = 0.0;  // <= 0 selects the median heuristic per pair
  MmdEstimator estimator = MmdEstimator::Biased;
};

/// Median pairwise distance of the pooled sample sets, divided by sqrt(2).
/// Falls back to 1 when every pooled point coincides.
inline double median_heuristic_bandwidth(const ad::Tensor& x, const ad::Tensor& y) {
  const int nx = x.shape()[0], ny = y.shape()[0], d = x.shape()[1];
  std::vector<const std::vector<double>*> blocks = {&x.values(), &y.values()};
  const int total = nx + ny;
  auto row = [&](int i) {
    return i < nx ? x.values().data() + static_cast<size_t>(i) * d
                  : y.values().data() + static_cast<size_t>(i - nx) * d;
  };
  std::vector<double> dists;
  dists.reserve(static_cast<size_t>(total) * (total - 1) / 2);
  for (int i = 0; i < total; ++i)
    for (int j = i + 1; j < total; ++j) {
      double s = 0.0;
      const double* a = row(i);
      const double* b = row(j);
      for (int k = 0; k < d; ++k) {
        double diff = a[k] - b[k];
        s += diff * diff;
      }
      dists.push_back(std::sqrt(s));
    }
  if (dists.empty()) return 1.0;
  std::sort(dists.begin(), dists.end());
  size_t mid = dists.size() / 2;
  double med = dists.size() % 2 ? dists[mid] : 0.5 * (dists[mid - 1] + dists[mid]);
  if (med <= 0.0) return 1.0;
  return med / std::sqrt(2.0);
}

/// Gaussian-kernel MMD averaged over strict modality pairs with the printed
/// 2/(M(M-1)) factor. Biased keeps self-pairs (V-statistic); Unbiased drops
/// the diagonal (U-statistic) and needs at least 2 samples per block.
inline ad::Tensor l_mmd(const std::vector<ad::Tensor>& features, const KernelConfig& cfg) {
  const int m = static_cast<int>(features.size());
  if (m < 2) throw MismatchedDims("l_mmd: need at least 2 modalities");
  for (const auto& f : features) {
    if (f.rank() != 2)
      throw ShapeMismatch("l_mmd: expected (N,d) blocks, got " + ad::shape_str(f.shape()));
    if (f.shape()[1] != features[0].shape()[1])
      throw MismatchedDims("l_mmd: feature dim " + std::to_string(f.shape()[1]) + " vs " +
                           std::to_string(features[0].shape()[1]));
    int n = f.shape()[0];
    if (n < 1 || (cfg.estimator == MmdEstimator::Unbiased && n < 2))
      throw TooFewSamples("l_mmd: block with " + std::to_string(n) + " samples");
  }
  if (cfg.bandwidth < 0.0)
    throw NonPositiveBandwidth("l_mmd: bandwidth = " + std::to_string(cfg.bandwidth));

  auto kernel_matrix = [](const ad::Tensor& a, const ad::Tensor& b, double sigma) {
    return ad::exp(ad::scale(ad::pairwise_sqdist(a, b), -1.0 / (2.0 * sigma * sigma)));
  };
  auto within_term = [&](const ad::Tensor& k, int n) {
    if (cfg.estimator == MmdEstimator::Biased) return ad::mean_all(k);
    // k(x,x) = 1 exactly, so the diagonal removal is a constant shift
    return ad::scale(ad::add(ad::sum_all(k), ad::Tensor::scalar(-static_cast<double>(n))),
                     1.0 / (static_cast<double>(n) * (n - 1)));
  };

  ad::Tensor total = ad::Tensor::scalar(0.0);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      double sigma = cfg.bandwidth > 0.0 ? cfg.bandwidth
                                         : median_heuristic_bandwidth(features[i], features[j]);
      ad::Tensor kxx = kernel_matrix(features[i], features[i], sigma);
      ad::Tensor kyy = kernel_matrix(features[j], features[j], sigma);
      ad::Tensor kxy = kernel_matrix(features[i], features[j], sigma);
      ad::Tensor pair = ad::sub(
          ad::add(within_term(kxx, features[i].shape()[0]),
                  within_term(kyy, features[j].shape()[0])),
          ad::scale(ad::mean_all(kxy), 2.0));
      total = ad::add(total, pair);
    }
  return ad::scale(total, 2.0 / (static_cast<double>(m) * (m - 1)));
}

/// Single affine+tanh layer standing in for the probabilistic distribution
/// encoder; with identity weights and zero bias it reduces to tanh(f).
inline ad::Tensor pde_project(const ad::Tensor& f, const ad::Tensor& weight,
                              const ad::Tensor& bias) {
  return ad::tanh(ad::bias_add(ad::matmul(f, weight), bias));
}

}  // namespace decalign
