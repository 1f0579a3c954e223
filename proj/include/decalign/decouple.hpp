#pragma once

#include <vector>

#include "decalign/errors.hpp"
#include "decalign/tensor.hpp"

namespace decalign {

/// Per-modality unique/common feature pair, (N, d) each after temporal
/// pooling.
struct DecoupledFeatures {
  std::vector<ad::Tensor> unique;
  std::vector<ad::Tensor> common;

  int modalities() const { return static_cast<int>(unique.size()); }
};

enum class DecoupleMode { Squared, PaperLiteral };
enum class DecoupleGranularity { Rowwise, Flatten };

namespace detail {

// Cosine similarity per row of (N,d) blocks u, v — masked to 0 where either
// row norm is below 1e-12 so degenerate rows contribute nothing.
inline ad::Tensor masked_row_cosine(const ad::Tensor& u, const ad::Tensor& v,
                                    int* zero_rows) {
  const int n = u.shape()[0];
  ad::Tensor dots = ad::sum(ad::mul(u, v), 1);
  ad::Tensor nu = ad::l2_norm(u, 1);
  ad::Tensor nv = ad::l2_norm(v, 1);

  std::vector<double> mask(n), inv_mask(n);
  for (int i = 0; i < n; ++i) {
    bool live = nu.values()[i] >= 1e-12 && nv.values()[i] >= 1e-12;
    mask[i] = live ? 1.0 : 0.0;
    inv_mask[i] = live ? 0.0 : 1.0;
    if (!live && zero_rows) ++*zero_rows;
  }
  ad::Tensor mask_t(ad::Shape{n}, mask);
  ad::Tensor one_minus(ad::Shape{n}, inv_mask);

  // masked rows divide by 1 and multiply by 0, keeping the pass NaN-free
  ad::Tensor denom = ad::add(ad::mul(ad::mul(nu, nv), mask_t), one_minus);
  return ad::mul(ad::mul(dots, mask_t), ad::power(denom, -1.0));
}

}  // namespace detail

/// Decoupling loss: cosine overlap between unique and common features,
/// summed over modalities. Squared mode targets orthogonality (|cos| -> 0);
/// PaperLiteral keeps the raw signed cosine. Rowwise averages per-sample
/// cosines; Flatten treats each whole block as one vector.
inline ad::Tensor l_dec(const DecoupledFeatures& feats,
                        DecoupleMode mode = DecoupleMode::Squared,
                        DecoupleGranularity granularity = DecoupleGranularity::Rowwise,
                        int* zero_rows = nullptr) {
  if (feats.unique.size() != feats.common.size() || feats.unique.empty())
    throw ShapeMismatch("l_dec: need matching unique/common blocks per modality");
  if (zero_rows) *zero_rows = 0;

  ad::Tensor total = ad::Tensor::scalar(0.0);
  for (int m = 0; m < feats.modalities(); ++m) {
    const ad::Tensor& u0 = feats.unique[m];
    const ad::Tensor& v0 = feats.common[m];
    if (u0.shape() != v0.shape())
      throw ShapeMismatch("l_dec: modality " + std::to_string(m) + " blocks " +
                          ad::shape_str(u0.shape()) + " vs " + ad::shape_str(v0.shape()));
    ad::Tensor u = u0, v = v0;
    if (granularity == DecoupleGranularity::Flatten) {
      int total_len = static_cast<int>(u0.size());
      u = ad::reshape(u0, ad::Shape{1, total_len});
      v = ad::reshape(v0, ad::Shape{1, total_len});
    }
    ad::Tensor cos = detail::masked_row_cosine(u, v, zero_rows);
    if (mode == DecoupleMode::Squared) cos = ad::mul(cos, cos);
    total = ad::add(total, ad::mean(cos, 0));
  }
  return total;
}

}  // namespace decalign
