#pragma once

#include <cmath>
#include <vector>

#include "decalign/errors.hpp"
#include "decalign/gmm.hpp"
#include "decalign/linalg.hpp"
#include "decalign/mmot.hpp"
#include "decalign/tensor.hpp"

namespace decalign {

/// Inputs of the heterogeneity loss for one refit cycle. Everything in here
/// sits behind the stop-gradient boundary: prototypes, plan and costs are
/// plain values, never tape nodes.
struct HeteroContext {
  std::vector<GmmModel> models;
  TransportPlan plan;
  CostTensor cost;

  void validate() const {
    const int m = static_cast<int>(models.size());
    if (m == 0) throw ShapeMismatch("HeteroContext: no models");
    const int k = models[0].components;
    const int d = models[0].dim();
    for (const auto& mod : models) {
      if (mod.components != k) throw MismatchedK("HeteroContext: models disagree on K");
      if (mod.dim() != d) throw DimensionMismatch("HeteroContext: models disagree on dim");
    }
    if (plan.modalities != m || plan.prototypes != k ||
        cost.modalities != m || cost.prototypes != k)
      throw ShapeMismatch("HeteroContext: plan/cost shape does not match models");
  }
};

enum class ProtoPairing { AllPairs, FixedTarget };

/// Global transport term sum_k T*(k) C(k). A detached diagnostic: it is
/// reported but contributes no gradient.
inline double l_ot(const HeteroContext& ctx) {
  ctx.validate();
  if (ctx.plan.values.size() != ctx.cost.values.size())
    throw ShapeMismatch("l_ot: plan and cost sizes differ");
  double total = 0.0;
  for (size_t i = 0; i < ctx.plan.values.size(); ++i)
    total += ctx.plan.values[i] * ctx.cost.values[i];
  return total;
}

namespace detail {

// Responsibilities of `f` under `model`, on tape: softmax over component
// log-joints, with the quadratic form differentiable in f. Prototype
// parameters enter as constants only.
inline ad::Tensor responsibilities_on_tape(const ad::Tensor& f, const GmmModel& model) {
  const int n = f.shape()[0], d = f.shape()[1], k = model.components;
  if (model.dim() != d)
    throw DimensionMismatch("l_proto: features dim " + std::to_string(d) + " vs prototypes " +
                            std::to_string(model.dim()));
  std::vector<ad::Tensor> cols;
  cols.reserve(k);
  for (int c = 0; c < k; ++c) {
    linalg::Cholesky ch = linalg::cholesky(model.covariances[c]);
    linalg::Matrix inv = linalg::spd_inverse(model.covariances[c]);
    double log_norm = std::log(std::max(model.weights[c], 1e-300)) -
                      0.5 * (ch.log_det + d * std::log(2.0 * M_PI));
    ad::Tensor mu(ad::Shape{d}, model.means[c]);
    ad::Tensor inv_t(ad::Shape{d, d}, inv.data());
    ad::Tensor diff = ad::sub(f, ad::tile_rows(mu, n));
    ad::Tensor quad = ad::sum(ad::mul(ad::matmul(diff, inv_t), diff), 1);  // (N)
    ad::Tensor logit = ad::add(ad::scale(quad, -0.5), ad::Tensor::scalar(log_norm));
    cols.push_back(ad::reshape(logit, ad::Shape{n, 1}));
  }
  return ad::softmax(ad::concat(cols, 1), 1);
}

}  // namespace detail

/// Sample-to-prototype calibration term of the heterogeneity loss:
/// (1/N) sum_n sum_k w_i^n(k) ||F_i^n - mu_j^k||^2, responsibilities from
/// the source modality, means from the target, averaged over ordered pairs.
/// The gradient flows into the features only.
inline ad::Tensor l_proto(const std::vector<ad::Tensor>& features, const HeteroContext& ctx,
                          ProtoPairing pairing = ProtoPairing::AllPairs,
                          int fixed_target = 0) {
  ctx.validate();
  const int m = static_cast<int>(ctx.models.size());
  if (static_cast<int>(features.size()) != m)
    throw DimensionMismatch("l_proto: " + std::to_string(features.size()) +
                            " feature blocks for " + std::to_string(m) + " modalities");
  const int k = ctx.models[0].components;
  const int d = ctx.models[0].dim();

  // constant prototype mean blocks per modality
  std::vector<ad::Tensor> proto_means;
  proto_means.reserve(m);
  for (const auto& model : ctx.models) {
    std::vector<double> flat(static_cast<size_t>(k) * d);
    for (int c = 0; c < k; ++c)
      for (int j = 0; j < d; ++j) flat[static_cast<size_t>(c) * d + j] = model.means[c][j];
    proto_means.emplace_back(ad::Shape{k, d}, std::move(flat));
  }

  ad::Tensor total = ad::Tensor::scalar(0.0);
  int pair_count = 0;
  for (int i = 0; i < m; ++i) {
    if (pairing == ProtoPairing::FixedTarget && i == fixed_target) continue;
    const int n = features[i].shape()[0];
    ad::Tensor w = detail::responsibilities_on_tape(features[i], ctx.models[i]);  // (N,K)
    for (int j = 0; j < m; ++j) {
      if (j == i) continue;
      if (pairing == ProtoPairing::FixedTarget && j != fixed_target) continue;
      ad::Tensor dist = ad::pairwise_sqdist(features[i], proto_means[j]);  // (N,K)
      total = ad::add(total, ad::scale(ad::sum_all(ad::mul(w, dist)), 1.0 / n));
      ++pair_count;
    }
  }
  if (pair_count == 0) throw ShapeMismatch("l_proto: no modality pairs to align");
  return ad::scale(total, 1.0 / pair_count);
}

struct HeteroLoss {
  ad::Tensor total;  // ot + proto, on tape (ot enters as a constant)
  double ot = 0.0;
  ad::Tensor proto;
};

/// Combined heterogeneity alignment: detached transport cost plus the
/// differentiable prototype calibration term.
inline HeteroLoss l_hete(const std::vector<ad::Tensor>& features, const HeteroContext& ctx,
                         ProtoPairing pairing = ProtoPairing::AllPairs, int fixed_target = 0) {
  HeteroLoss out;
  out.ot = l_ot(ctx);
  out.proto = l_proto(features, ctx, pairing, fixed_target);
  out.total = ad::add(out.proto, ad::Tensor::scalar(out.ot));
  return out;
}

}  // namespace decalign
