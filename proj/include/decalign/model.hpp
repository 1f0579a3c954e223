#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "decalign/decouple.hpp"
#include "decalign/errors.hpp"
#include "decalign/linalg.hpp"
#include "decalign/rng.hpp"
#include "decalign/tensor.hpp"

namespace decalign {

struct ModelConfig {
  int modalities = 3;
  int d_s = 16;      // shared feature dimension
  int t_s = 8;       // shared temporal length
  int hidden = 32;   // encoder hidden width
  int heads = 2;
  int conv_width = 3;
  int classes = 3;
  std::vector<std::pair<int, int>> raw_dims;  // per modality (T_m, d_m)
};

/// Raw per-modality sequences plus aligned targets/labels.
struct RawModalityInput {
  std::vector<ad::Tensor> x;      // per modality (N, T_m, d_m)
  std::vector<double> targets;    // regression target per sample
  std::vector<int> labels;        // class index per sample

  int samples() const { return x.empty() ? 0 : x[0].shape()[0]; }
};

/// Projected sequences, one (N, T_s, d_s) block per modality.
struct ModalityBatch {
  std::vector<ad::Tensor> x;
  std::vector<double> targets;
  std::vector<int> labels;

  int samples() const { return x.empty() ? 0 : x[0].shape()[0]; }
};

/// Named, ordered parameter arrays. Iteration order is insertion order, so
/// updates and checkpoints are deterministic.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    ad::Shape shape;
    std::vector<double> value;
    std::vector<double> velocity;  // SGD momentum state
  };

  void add(const std::string& name, ad::Shape shape, std::vector<double> value) {
    if (index_.count(name)) throw Error("ParamStore: duplicate parameter " + name);
    index_[name] = entries_.size();
    Entry e;
    e.name = name;
    e.shape = std::move(shape);
    e.velocity.assign(value.size(), 0.0);
    e.value = std::move(value);
    entries_.push_back(std::move(e));
  }

  Entry& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("ParamStore: unknown parameter " + name);
    return entries_[it->second];
  }
  const Entry& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("ParamStore: unknown parameter " + name);
    return entries_[it->second];
  }
  bool has(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += static_cast<int64_t>(e.value.size());
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

/// Per-pass view of the parameters: leaves on a tape when training, plain
/// constants when evaluating.
struct BoundParams {
  std::unordered_map<std::string, ad::Tensor> by_name;

  const ad::Tensor& operator()(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("BoundParams: unknown parameter " + name);
    return it->second;
  }
};

inline BoundParams bind_params(const ParamStore& store, ad::Tape* tape) {
  BoundParams bound;
  for (const auto& e : store.entries())
    bound.by_name.emplace(e.name,
                          tape ? tape->leaf(e.shape, e.value) : ad::Tensor(e.shape, e.value));
  return bound;
}

namespace model_detail {

inline std::string conv_kernel(int m) { return "conv.m" + std::to_string(m) + ".kernel"; }
inline std::string conv_bias(int m) { return "conv.m" + std::to_string(m) + ".bias"; }
inline std::string enc(const std::string& which, const std::string& part) {
  return "enc." + which + "." + part;
}
inline std::string attn_pair(int i, int j, const std::string& part) {
  return "attn.m" + std::to_string(i) + std::to_string(j) + "." + part;
}
inline std::string attn_out(int i) { return "attn.m" + std::to_string(i) + ".wo"; }

inline std::vector<double> uniform_init(Rng& rng, int64_t n, int fan_in) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return v;
}

}  // namespace model_detail

/// Fresh parameter set for the configuration, seeded. The distribution
/// encoder starts at identity so it is a no-op modulo tanh.
inline ParamStore init_params(const ModelConfig& cfg, uint64_t seed) {
  if (static_cast<int>(cfg.raw_dims.size()) != cfg.modalities)
    throw InvalidSpec("init_params: raw_dims entries != modalities");
  if (cfg.conv_width % 2 == 0) throw InvalidSpec("init_params: conv width must be odd");
  if (cfg.d_s % cfg.heads != 0) throw InvalidSpec("init_params: d_s must divide into heads");
  using namespace model_detail;
  Rng rng = Rng(seed).fork(0x6d6f64656cULL);
  ParamStore p;
  for (int m = 0; m < cfg.modalities; ++m) {
    int dm = cfg.raw_dims[m].second;
    int fan = cfg.conv_width * dm;
    p.add(conv_kernel(m), {cfg.conv_width, dm, cfg.d_s},
          uniform_init(rng, static_cast<int64_t>(cfg.conv_width) * dm * cfg.d_s, fan));
    p.add(conv_bias(m), {cfg.d_s}, uniform_init(rng, cfg.d_s, fan));
  }
  auto add_mlp = [&](const std::string& which) {
    p.add(enc(which, "w1"), {cfg.d_s, cfg.hidden},
          uniform_init(rng, static_cast<int64_t>(cfg.d_s) * cfg.hidden, cfg.d_s));
    p.add(enc(which, "b1"), {cfg.hidden}, uniform_init(rng, cfg.hidden, cfg.d_s));
    p.add(enc(which, "w2"), {cfg.hidden, cfg.d_s},
          uniform_init(rng, static_cast<int64_t>(cfg.hidden) * cfg.d_s, cfg.hidden));
    p.add(enc(which, "b2"), {cfg.d_s}, uniform_init(rng, cfg.d_s, cfg.hidden));
  };
  for (int m = 0; m < cfg.modalities; ++m) add_mlp("uni.m" + std::to_string(m));
  add_mlp("com");
  for (int i = 0; i < cfg.modalities; ++i) {
    for (int j = 0; j < cfg.modalities; ++j) {
      if (i == j) continue;
      for (const char* part : {"wq", "wk", "wv"})
        p.add(attn_pair(i, j, part), {cfg.d_s, cfg.d_s},
              uniform_init(rng, static_cast<int64_t>(cfg.d_s) * cfg.d_s, cfg.d_s));
    }
    if (cfg.modalities > 1)
      p.add(attn_out(i), {cfg.d_s, cfg.d_s},
            uniform_init(rng, static_cast<int64_t>(cfg.d_s) * cfg.d_s, cfg.d_s));
  }
  int fused_width = 2 * cfg.modalities * cfg.d_s;
  p.add("head.w", {fused_width, 1 + cfg.classes},
        uniform_init(rng, static_cast<int64_t>(fused_width) * (1 + cfg.classes), fused_width));
  p.add("head.b", {1 + cfg.classes}, uniform_init(rng, 1 + cfg.classes, fused_width));

  std::vector<double> eye(static_cast<size_t>(cfg.d_s) * cfg.d_s, 0.0);
  for (int i = 0; i < cfg.d_s; ++i) eye[static_cast<size_t>(i) * cfg.d_s + i] = 1.0;
  p.add("pde.w", {cfg.d_s, cfg.d_s}, std::move(eye));
  p.add("pde.b", {cfg.d_s}, std::vector<double>(cfg.d_s, 0.0));
  return p;
}

/// Linear-interpolation resampling matrix mapping t_in steps onto t_out.
inline linalg::Matrix time_resample_matrix(int t_in, int t_out) {
  linalg::Matrix r(t_out, t_in);
  for (int s = 0; s < t_out; ++s) {
    double pos = t_out > 1 ? static_cast<double>(s) * (t_in - 1) / (t_out - 1)
                           : 0.5 * (t_in - 1);
    int lo = static_cast<int>(pos);
    double frac = pos - lo;
    r(s, lo) += 1.0 - frac;
    if (lo + 1 < t_in && frac > 0.0) r(s, lo + 1) += frac;
  }
  return r;
}

/// Modality-specific temporal convolution (d_m -> d_s) followed by linear
/// resampling of the time axis onto T_s.
inline ModalityBatch temporal_project(const RawModalityInput& raw, const BoundParams& params,
                                      const ModelConfig& cfg) {
  using namespace model_detail;
  if (static_cast<int>(raw.x.size()) != cfg.modalities)
    throw ShapeMismatch("temporal_project: " + std::to_string(raw.x.size()) +
                        " blocks for " + std::to_string(cfg.modalities) + " modalities");
  ModalityBatch out;
  out.targets = raw.targets;
  out.labels = raw.labels;
  for (int m = 0; m < cfg.modalities; ++m) {
    const ad::Tensor& x = raw.x[m];
    int t_m = x.shape()[1];
    if (t_m < cfg.conv_width)
      throw SequenceTooShort("temporal_project: T=" + std::to_string(t_m) +
                             " shorter than kernel width " + std::to_string(cfg.conv_width));
    ad::Tensor h = ad::bias_add(ad::conv1d(x, params(conv_kernel(m))), params(conv_bias(m)));
    if (t_m != cfg.t_s) {
      linalg::Matrix r = time_resample_matrix(t_m, cfg.t_s);
      // contract the time axis: (N,d,T_m) x (T_m,T_s), then swap back
      ad::Tensor rt(ad::Shape{t_m, cfg.t_s}, r.transposed().data());
      h = ad::transpose(ad::matmul(ad::transpose(h, 1, 2), rt), 1, 2);
    }
    out.x.push_back(std::move(h));
  }
  return out;
}

namespace model_detail {

inline ad::Tensor mlp(const ad::Tensor& x, const BoundParams& p, const std::string& which) {
  ad::Tensor h = ad::tanh(ad::bias_add(ad::matmul(x, p(enc(which, "w1"))), p(enc(which, "b1"))));
  return ad::bias_add(ad::matmul(h, p(enc(which, "w2"))), p(enc(which, "b2")));
}

}  // namespace model_detail

/// Per-timestep encoders (modality-unique and shared) with mean pooling
/// over the time axis.
inline DecoupledFeatures encode(const ModalityBatch& batch, const BoundParams& params,
                                const ModelConfig& cfg) {
  using namespace model_detail;
  DecoupledFeatures feats;
  for (int m = 0; m < cfg.modalities; ++m) {
    feats.unique.push_back(ad::mean(mlp(batch.x[m], params, "uni.m" + std::to_string(m)), 1));
    feats.common.push_back(ad::mean(mlp(batch.x[m], params, "com"), 1));
  }
  return feats;
}

struct FuseResult {
  ad::Tensor fused;                          // (N, 2 M d_s)
  std::vector<ad::Tensor> attention_rows;    // per (modality, head): (N, M-1), row-stochastic
};

/// Cross-modal attention over the other modalities' unique features (one
/// key/value token per source modality, pair-specific projections), residual
/// added, concatenated with the common features. `use_attention = false`
/// bypasses the exchange and passes unique features straight through.
inline FuseResult fuse(const DecoupledFeatures& feats, const BoundParams& params,
                       const ModelConfig& cfg, bool use_attention = true) {
  using namespace model_detail;
  const int m_count = cfg.modalities;
  if (feats.modalities() != m_count)
    throw ShapeMismatch("fuse: " + std::to_string(feats.modalities()) + " modalities, expected " +
                        std::to_string(m_count));
  const int d = cfg.d_s;
  const int head_dim = d / cfg.heads;

  FuseResult out;
  std::vector<ad::Tensor> parts;
  for (int i = 0; i < m_count; ++i) {
    if (m_count == 1 || !use_attention) {
      parts.push_back(feats.unique[i]);
      continue;
    }
    const int n = feats.unique[i].shape()[0];
    std::vector<int> others;
    for (int j = 0; j < m_count; ++j)
      if (j != i) others.push_back(j);

    std::vector<ad::Tensor> head_outputs;
    for (int h = 0; h < cfg.heads; ++h) {
      std::vector<ad::Tensor> scores;
      std::vector<ad::Tensor> values;
      for (int j : others) {
        ad::Tensor q = ad::slice(ad::matmul(feats.unique[i], params(attn_pair(i, j, "wq"))), 1,
                                 h * head_dim, head_dim);
        ad::Tensor k = ad::slice(ad::matmul(feats.unique[j], params(attn_pair(i, j, "wk"))), 1,
                                 h * head_dim, head_dim);
        ad::Tensor v = ad::slice(ad::matmul(feats.unique[j], params(attn_pair(i, j, "wv"))), 1,
                                 h * head_dim, head_dim);
        ad::Tensor s = ad::scale(ad::sum(ad::mul(q, k), 1), 1.0 / std::sqrt(head_dim));
        scores.push_back(ad::reshape(s, ad::Shape{n, 1}));
        values.push_back(std::move(v));
      }
      ad::Tensor w = ad::softmax(ad::concat(scores, 1), 1);  // (N, M-1)
      out.attention_rows.push_back(w);
      ad::Tensor ones_row(ad::Shape{1, head_dim}, std::vector<double>(head_dim, 1.0));
      ad::Tensor mixed;
      for (size_t jj = 0; jj < others.size(); ++jj) {
        ad::Tensor wj = ad::matmul(ad::slice(w, 1, static_cast<int>(jj), 1), ones_row);
        ad::Tensor contrib = ad::mul(wj, values[jj]);
        mixed = jj == 0 ? contrib : ad::add(mixed, contrib);
      }
      head_outputs.push_back(std::move(mixed));
    }
    ad::Tensor attn = ad::concat(head_outputs, 1);  // (N, d_s)
    parts.push_back(ad::add(feats.unique[i], ad::matmul(attn, params(attn_out(i)))));
  }
  for (int i = 0; i < m_count; ++i) parts.push_back(feats.common[i]);
  out.fused = ad::concat(parts, 1);
  return out;
}

struct Prediction {
  ad::Tensor regression;  // (N)
  ad::Tensor logits;      // (N, classes)
};

/// Shared affine trunk with a regression column and class-logit columns.
inline Prediction predict(const ad::Tensor& fused, const BoundParams& params,
                          const ModelConfig& cfg) {
  ad::Tensor out = ad::bias_add(ad::matmul(fused, params("head.w")), params("head.b"));
  const int n = fused.shape()[0];
  Prediction pred;
  pred.regression = ad::reshape(ad::slice(out, 1, 0, 1), ad::Shape{n});
  pred.logits = ad::slice(out, 1, 1, cfg.classes);
  return pred;
}

}  // namespace decalign
