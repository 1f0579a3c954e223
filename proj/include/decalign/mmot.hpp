#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "decalign/errors.hpp"
#include "decalign/gmm.hpp"
#include "decalign/linalg.hpp"

namespace decalign {

/// Joint prototype matching cost over all modality combinations, stored
/// dense with k_1 as the slowest index.
struct CostTensor {
  int modalities = 0;  // M
  int prototypes = 0;  // K
  std::vector<double> values;

  int64_t size() const { return static_cast<int64_t>(values.size()); }
};

/// One probability vector over prototypes per modality.
struct Marginals {
  std::vector<std::vector<double>> nu;
};

struct TransportPlan {
  int modalities = 0;
  int prototypes = 0;
  std::vector<double> values;    // K^M joint probabilities
  double lambda = 0.0;           // entropy weight actually applied to the raw costs
  int iterations_used = 0;       // full cyclic sweeps
  double marginal_residual = 0.0;
};

/// Thrown when the sweep cap is hit; carries the best plan so callers can
/// still inspect or persist it.
struct SinkhornNoConvergence : Error {
  SinkhornNoConvergence(const std::string& msg, TransportPlan p)
      : Error(msg), plan(std::move(p)) {}
  TransportPlan plan;
};

/// Gaussian-to-Gaussian alignment cost:
/// ||mu_p - mu_q||^2 + Tr(S_p + S_q - 2 (S_p S_q)^{1/2}).
/// The cross square root is evaluated as (S_p^{1/2} S_q S_p^{1/2})^{1/2},
/// which has the same trace and keeps the computation symmetric PSD.
inline double pairwise_cost(const std::vector<double>& mu_p, const linalg::Matrix& cov_p,
                            const std::vector<double>& mu_q, const linalg::Matrix& cov_q) {
  const int d = static_cast<int>(mu_p.size());
  if (mu_q.size() != mu_p.size() || cov_p.rows() != d || cov_q.rows() != d)
    throw DimensionMismatch("pairwise_cost: dims " + std::to_string(mu_p.size()) + " vs " +
                            std::to_string(mu_q.size()));
  double mean_term = 0.0;
  for (int i = 0; i < d; ++i) {
    double diff = mu_p[i] - mu_q[i];
    mean_term += diff * diff;
  }
  linalg::Matrix root_p = linalg::sqrtm_psd(cov_p);
  linalg::Matrix inner = root_p * cov_q * root_p;
  // symmetrize round-off before taking the square root
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) {
      double v = 0.5 * (inner(i, j) + inner(j, i));
      inner(i, j) = inner(j, i) = v;
    }
  double cross = linalg::sqrtm_psd(inner).trace();
  double cost = mean_term + cov_p.trace() + cov_q.trace() - 2.0 * cross;
  return cost < 0.0 ? 0.0 : cost;
}

/// C(k_1..k_M) = sum over strict pairs i<j of C_{i,j}(k_i,k_j).
inline CostTensor build_cost_tensor(const std::vector<GmmModel>& models) {
  const int m = static_cast<int>(models.size());
  if (m < 1) throw EmptyInput("build_cost_tensor: no models");
  const int k = models[0].components;
  const int d = models[0].dim();
  for (const auto& mod : models) {
    if (mod.components != k)
      throw MismatchedK("build_cost_tensor: K=" + std::to_string(mod.components) +
                        " vs K=" + std::to_string(k));
    if (mod.dim() != d)
      throw DimensionMismatch("build_cost_tensor: feature dim " + std::to_string(mod.dim()) +
                              " vs " + std::to_string(d));
  }
  double entries = std::pow(static_cast<double>(k), m);
  if (entries > 1e7)
    throw Error("build_cost_tensor: K^M = " + std::to_string(entries) + " exceeds the dense cap");

  // pairwise K x K blocks first
  std::vector<std::vector<double>> pair_cost;  // indexed by pair, then k_i*K+k_j
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      std::vector<double> block(static_cast<size_t>(k) * k);
      for (int a = 0; a < k; ++a)
        for (int b = 0; b < k; ++b)
          block[static_cast<size_t>(a) * k + b] =
              pairwise_cost(models[i].means[a], models[i].covariances[a], models[j].means[b],
                            models[j].covariances[b]);
      pair_cost.push_back(std::move(block));
      pairs.emplace_back(i, j);
    }

  CostTensor out;
  out.modalities = m;
  out.prototypes = k;
  out.values.assign(static_cast<size_t>(entries), 0.0);
  std::vector<int> idx(m, 0);
  for (int64_t flat = 0; flat < out.size(); ++flat) {
    int64_t rem = flat;
    for (int i = m - 1; i >= 0; --i) {
      idx[i] = static_cast<int>(rem % k);
      rem /= k;
    }
    double c = 0.0;
    for (size_t p = 0; p < pairs.size(); ++p)
      c += pair_cost[p][static_cast<size_t>(idx[pairs[p].first]) * k + idx[pairs[p].second]];
    out.values[flat] = c < 0.0 ? 0.0 : c;
  }
  return out;
}

inline Marginals marginals_from_models(const std::vector<GmmModel>& models) {
  Marginals m;
  for (const auto& mod : models) m.nu.push_back(mod.weights);
  return m;
}

inline Marginals uniform_marginals(int modalities, int prototypes) {
  Marginals m;
  m.nu.assign(modalities, std::vector<double>(prototypes, 1.0 / prototypes));
  return m;
}

namespace detail {

inline void validate_marginals(const Marginals& nu, int m, int k) {
  if (static_cast<int>(nu.nu.size()) != m)
    throw DimensionMismatch("sinkhorn_mm: " + std::to_string(nu.nu.size()) +
                            " marginals for M=" + std::to_string(m));
  for (const auto& v : nu.nu) {
    if (static_cast<int>(v.size()) != k)
      throw DimensionMismatch("sinkhorn_mm: marginal length " + std::to_string(v.size()) +
                              " for K=" + std::to_string(k));
    double sum = 0.0;
    for (double x : v) {
      if (x < 0.0) throw Error("sinkhorn_mm: negative marginal entry");
      sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-8)
      throw Error("sinkhorn_mm: marginal sums to " + std::to_string(sum));
  }
}

}  // namespace detail

/// Entropy-regularized multi-marginal Sinkhorn, all updates in log space.
/// Costs are normalized by their max entry before solving, so the supplied
/// lambda is scale-free; the plan records lambda * max(C), the entropy
/// weight that the returned plan actually optimizes against the raw costs.
inline TransportPlan sinkhorn_mm(const CostTensor& cost, const Marginals& nu, double lambda,
                                 int max_iters = 500, double tol = 1e-6) {
  if (lambda <= 0.0)
    throw NonPositiveLambda("sinkhorn_mm: lambda = " + std::to_string(lambda));
  if (tol <= 0.0) throw Error("sinkhorn_mm: tol must be positive");
  const int m = cost.modalities, k = cost.prototypes;
  detail::validate_marginals(nu, m, k);
  const int64_t total = cost.size();

  double cmax = 0.0;
  for (double c : cost.values) cmax = std::max(cmax, std::abs(c));
  const double lambda_eff = cmax > 0.0 ? lambda : 1.0;  // zero cost: any lambda, plan is product
  std::vector<double> neg_c_over_lambda(total);
  for (int64_t i = 0; i < total; ++i)
    neg_c_over_lambda[i] = cmax > 0.0 ? -cost.values[i] / (cmax * lambda_eff) : 0.0;

  std::vector<std::vector<double>> log_nu(m, std::vector<double>(k));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j)
      log_nu[i][j] = nu.nu[i][j] > 0.0 ? std::log(nu.nu[i][j])
                                       : -std::numeric_limits<double>::infinity();

  std::vector<std::vector<double>> f(m, std::vector<double>(k, 0.0));
  std::vector<int64_t> stride(m, 1);
  for (int i = m - 2; i >= 0; --i) stride[i] = stride[i + 1] * k;

  auto log_plan_entry = [&](int64_t flat) {
    double s = neg_c_over_lambda[flat];
    int64_t rem = flat;
    for (int i = 0; i < m; ++i) {
      s += f[i][rem / stride[i]];
      rem %= stride[i];
    }
    return s;
  };

  TransportPlan plan;
  plan.modalities = m;
  plan.prototypes = k;
  plan.lambda = cmax > 0.0 ? lambda * cmax : lambda;
  plan.values.assign(total, 0.0);

  std::vector<double> bucket_max(k), bucket_sum(k);
  double residual = std::numeric_limits<double>::infinity();
  int sweep = 0;
  for (; sweep < max_iters; ++sweep) {
    for (int i = 0; i < m; ++i) {
      // streaming logsumexp over everything but axis i, excluding f_i itself
      bucket_max.assign(k, -std::numeric_limits<double>::infinity());
      bucket_sum.assign(k, 0.0);
      for (int64_t flat = 0; flat < total; ++flat) {
        int ki = static_cast<int>((flat / stride[i]) % k);
        double v = log_plan_entry(flat) - f[i][ki];
        if (std::isinf(v) && v < 0) continue;
        if (v <= bucket_max[ki]) {
          bucket_sum[ki] += std::exp(v - bucket_max[ki]);
        } else {
          bucket_sum[ki] = bucket_sum[ki] * std::exp(bucket_max[ki] - v) + 1.0;
          bucket_max[ki] = v;
        }
      }
      for (int ki = 0; ki < k; ++ki) {
        double lse = bucket_sum[ki] > 0.0
                         ? bucket_max[ki] + std::log(bucket_sum[ki])
                         : -std::numeric_limits<double>::infinity();
        f[i][ki] = std::isinf(lse) ? log_nu[i][ki] : log_nu[i][ki] - lse;
      }
    }

    // feasibility after the full sweep
    residual = 0.0;
    std::vector<std::vector<double>> marg(m, std::vector<double>(k, 0.0));
    for (int64_t flat = 0; flat < total; ++flat) {
      double t = std::exp(log_plan_entry(flat));
      plan.values[flat] = t;
      int64_t rem = flat;
      for (int i = 0; i < m; ++i) {
        marg[i][rem / stride[i]] += t;
        rem %= stride[i];
      }
    }
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < k; ++j)
        residual = std::max(residual, std::abs(marg[i][j] - nu.nu[i][j]));
    if (residual < tol) {
      plan.iterations_used = sweep + 1;
      plan.marginal_residual = residual;
      return plan;
    }
  }
  plan.iterations_used = sweep;
  plan.marginal_residual = residual;
  throw SinkhornNoConvergence("sinkhorn_mm: residual " + std::to_string(residual) + " after " +
                                  std::to_string(max_iters) + " sweeps",
                              std::move(plan));
}

struct OtObjective {
  double transport_cost = 0.0;  // sum T * C
  double entropy_term = 0.0;    // lambda * sum T log T, with 0 log 0 = 0
};

inline OtObjective ot_objective(const TransportPlan& plan, const CostTensor& cost) {
  if (plan.modalities != cost.modalities || plan.prototypes != cost.prototypes ||
      plan.values.size() != cost.values.size())
    throw ShapeMismatch("ot_objective: plan (M=" + std::to_string(plan.modalities) + ",K=" +
                        std::to_string(plan.prototypes) + ") vs cost (M=" +
                        std::to_string(cost.modalities) + ",K=" +
                        std::to_string(cost.prototypes) + ")");
  OtObjective out;
  for (size_t i = 0; i < plan.values.size(); ++i) {
    double t = plan.values[i];
    out.transport_cost += t * cost.values[i];
    if (t > 0.0) out.entropy_term += t * std::log(t);
  }
  out.entropy_term *= plan.lambda;
  return out;
}

}  // namespace decalign
