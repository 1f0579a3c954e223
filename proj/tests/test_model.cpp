#include "decalign/model.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace decalign;
using ad::Shape;
using ad::Tape;
using ad::Tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.modalities = 2;
  cfg.d_s = 4;
  cfg.t_s = 3;
  cfg.hidden = 5;
  cfg.heads = 2;
  cfg.conv_width = 3;
  cfg.classes = 2;
  cfg.raw_dims = {{4, 3}, {5, 2}};
  return cfg;
}

RawModalityInput random_raw(Rng& rng, const ModelConfig& cfg, int n) {
  RawModalityInput raw;
  for (int m = 0; m < cfg.modalities; ++m) {
    auto [t, d] = cfg.raw_dims[m];
    raw.x.emplace_back(Shape{n, t, d}, oracles::random_vec(rng, static_cast<size_t>(n) * t * d));
  }
  raw.targets = oracles::random_vec(rng, n);
  for (int i = 0; i < n; ++i) raw.labels.push_back(static_cast<int>(rng.next_below(cfg.classes)));
  return raw;
}

std::vector<double> flatten_params(const ParamStore& store) {
  std::vector<double> flat;
  for (const auto& e : store.entries()) flat.insert(flat.end(), e.value.begin(), e.value.end());
  return flat;
}

void unflatten_params(ParamStore& store, const std::vector<double>& flat) {
  size_t at = 0;
  for (auto& e : store.entries()) {
    std::copy(flat.begin() + at, flat.begin() + at + e.value.size(), e.value.begin());
    at += e.value.size();
  }
}

// Scalar probe through the whole forward pass.
double full_forward_scalar(const ModelConfig& cfg, ParamStore& store,
                           const RawModalityInput& raw, Tape* tape,
                           std::vector<std::pair<std::string, const ad::Tensor*>>* leaves) {
  BoundParams bound = bind_params(store, tape);
  ModalityBatch batch = temporal_project(raw, bound, cfg);
  DecoupledFeatures feats = encode(batch, bound, cfg);
  FuseResult fused = fuse(feats, bound, cfg);
  Prediction pred = predict(fused.fused, bound, cfg);
  Tensor loss = ad::add(ad::sum_all(ad::tanh(pred.regression)),
                        ad::sum_all(ad::mul(pred.logits, pred.logits)));
  if (tape) {
    tape->backward(loss);
    if (leaves)
      for (const auto& e : store.entries())
        leaves->emplace_back(e.name, &bound.by_name.at(e.name));
  }
  (void)leaves;
  return loss.value();
}

}  // namespace

TEST(TemporalProject, IdentityKernelPassesThrough) {
  ModelConfig cfg;
  cfg.modalities = 1;
  cfg.d_s = 3;
  cfg.t_s = 4;
  cfg.conv_width = 3;
  cfg.classes = 2;
  cfg.heads = 1;
  cfg.raw_dims = {{4, 3}};  // T_m == T_s, d_m == d_s
  ParamStore p = init_params(cfg, 1);
  // center-tap identity kernel, zero bias
  auto& kernel = p.at("conv.m0.kernel");
  std::fill(kernel.value.begin(), kernel.value.end(), 0.0);
  for (int i = 0; i < 3; ++i) kernel.value[(1 * 3 + i) * 3 + i] = 1.0;
  std::fill(p.at("conv.m0.bias").value.begin(), p.at("conv.m0.bias").value.end(), 0.0);

  Rng rng(111);
  RawModalityInput raw = random_raw(rng, cfg, 2);
  BoundParams bound = bind_params(p, nullptr);
  ModalityBatch batch = temporal_project(raw, bound, cfg);
  EXPECT_LT(oracles::max_abs_diff(batch.x[0].values(), raw.x[0].values()), 1e-15);
}

TEST(TemporalProject, ConstantInputAveragingKernelStaysConstant) {
  ModelConfig cfg;
  cfg.modalities = 1;
  cfg.d_s = 2;
  cfg.t_s = 6;
  cfg.conv_width = 3;
  cfg.classes = 2;
  cfg.heads = 1;
  cfg.raw_dims = {{6, 2}};
  ParamStore p = init_params(cfg, 1);
  auto& kernel = p.at("conv.m0.kernel");
  std::fill(kernel.value.begin(), kernel.value.end(), 0.0);
  for (int u = 0; u < 3; ++u)
    for (int i = 0; i < 2; ++i) kernel.value[(u * 2 + i) * 2 + i] = 1.0 / 3.0;
  std::fill(p.at("conv.m0.bias").value.begin(), p.at("conv.m0.bias").value.end(), 0.0);

  RawModalityInput raw;
  raw.x.push_back(Tensor::full(Shape{1, 6, 2}, 4.2));
  BoundParams bound = bind_params(p, nullptr);
  ModalityBatch batch = temporal_project(raw, bound, cfg);
  // interior timesteps see the full averaging window
  for (int t = 1; t < 5; ++t)
    for (int i = 0; i < 2; ++i)
      EXPECT_NEAR(batch.x[0].values()[(t * 2) + i], 4.2, 1e-12);
}

TEST(TemporalProject, MatchesDirectLoopWithResampling) {
  ModelConfig cfg;
  cfg.modalities = 1;
  cfg.d_s = 2;
  cfg.t_s = 3;
  cfg.conv_width = 3;
  cfg.classes = 2;
  cfg.heads = 1;
  cfg.raw_dims = {{5, 2}};
  ParamStore p = init_params(cfg, 7);
  Rng rng(112);
  RawModalityInput raw = random_raw(rng, cfg, 2);
  BoundParams bound = bind_params(p, nullptr);
  ModalityBatch batch = temporal_project(raw, bound, cfg);

  const auto& kv = p.at("conv.m0.kernel").value;
  const auto& bv = p.at("conv.m0.bias").value;
  const auto& xv = raw.x[0].values();
  linalg::Matrix r = time_resample_matrix(5, 3);
  for (int b = 0; b < 2; ++b)
    for (int s = 0; s < 3; ++s)
      for (int o = 0; o < 2; ++o) {
        double acc = 0.0;
        for (int t = 0; t < 5; ++t) {
          if (r(s, t) == 0.0) continue;
          double conv = bv[o];
          for (int u = 0; u < 3; ++u) {
            int src = t + u - 1;
            if (src < 0 || src >= 5) continue;
            for (int i = 0; i < 2; ++i)
              conv += xv[(b * 5 + src) * 2 + i] * kv[(u * 2 + i) * 2 + o];
          }
          acc += r(s, t) * conv;
        }
        EXPECT_NEAR(batch.x[0].values()[(b * 3 + s) * 2 + o], acc, 1e-12);
      }
}

TEST(TemporalProject, RejectsShortSequences) {
  ModelConfig cfg = tiny_config();
  cfg.raw_dims = {{2, 3}, {5, 2}};  // first modality shorter than the kernel
  ParamStore p = init_params(cfg, 1);
  Rng rng(113);
  RawModalityInput raw;
  raw.x.emplace_back(Shape{1, 2, 3}, oracles::random_vec(rng, 6));
  raw.x.emplace_back(Shape{1, 5, 2}, oracles::random_vec(rng, 10));
  BoundParams bound = bind_params(p, nullptr);
  EXPECT_THROW(temporal_project(raw, bound, cfg), SequenceTooShort);
}

TEST(Encode, ZeroParamsGiveZeroFeatures) {
  ModelConfig cfg = tiny_config();
  ParamStore p = init_params(cfg, 1);
  for (auto& e : p.entries())
    if (e.name.rfind("enc.", 0) == 0) std::fill(e.value.begin(), e.value.end(), 0.0);
  Rng rng(114);
  RawModalityInput raw = random_raw(rng, cfg, 2);
  BoundParams bound = bind_params(p, nullptr);
  DecoupledFeatures feats = encode(temporal_project(raw, bound, cfg), bound, cfg);
  for (const auto& f : feats.unique)
    for (double v : f.values()) EXPECT_EQ(v, 0.0);
  for (const auto& f : feats.common)
    for (double v : f.values()) EXPECT_EQ(v, 0.0);
}

TEST(Encode, SingleTimestepPoolingIsIdentity) {
  ModelConfig cfg = tiny_config();
  cfg.t_s = 1;
  ParamStore p = init_params(cfg, 2);
  Rng rng(115);
  RawModalityInput raw = random_raw(rng, cfg, 3);
  BoundParams bound = bind_params(p, nullptr);
  ModalityBatch batch = temporal_project(raw, bound, cfg);
  DecoupledFeatures feats = encode(batch, bound, cfg);
  // pooling over one timestep: features equal that timestep's encoding
  ad::Tensor direct = model_detail::mlp(batch.x[0], bound, "uni.m0");
  EXPECT_LT(oracles::max_abs_diff(feats.unique[0].values(), direct.values()), 1e-15);
}

TEST(Fuse, ZeroValueWeightsLeaveResidual) {
  ModelConfig cfg = tiny_config();
  ParamStore p = init_params(cfg, 3);
  for (auto& e : p.entries())
    if (e.name.find(".wv") != std::string::npos) std::fill(e.value.begin(), e.value.end(), 0.0);
  Rng rng(116);
  RawModalityInput raw = random_raw(rng, cfg, 3);
  BoundParams bound = bind_params(p, nullptr);
  DecoupledFeatures feats = encode(temporal_project(raw, bound, cfg), bound, cfg);
  FuseResult out = fuse(feats, bound, cfg);
  // first M*d_s columns are the unique parts, which must equal the inputs
  for (int m = 0; m < cfg.modalities; ++m) {
    ad::Tensor part = ad::slice(out.fused, 1, m * cfg.d_s, cfg.d_s);
    EXPECT_LT(oracles::max_abs_diff(part.values(), feats.unique[m].values()), 1e-15);
  }
}

TEST(Fuse, SingleModalityConcatenatesUniqueAndCommon) {
  ModelConfig cfg = tiny_config();
  cfg.modalities = 1;
  cfg.raw_dims = {{4, 3}};
  ParamStore p = init_params(cfg, 4);
  Rng rng(117);
  RawModalityInput raw = random_raw(rng, cfg, 2);
  BoundParams bound = bind_params(p, nullptr);
  DecoupledFeatures feats = encode(temporal_project(raw, bound, cfg), bound, cfg);
  FuseResult out = fuse(feats, bound, cfg);
  ASSERT_EQ(out.fused.shape(), (Shape{2, 2 * cfg.d_s}));
  ad::Tensor uni = ad::slice(out.fused, 1, 0, cfg.d_s);
  ad::Tensor com = ad::slice(out.fused, 1, cfg.d_s, cfg.d_s);
  EXPECT_LT(oracles::max_abs_diff(uni.values(), feats.unique[0].values()), 1e-15);
  EXPECT_LT(oracles::max_abs_diff(com.values(), feats.common[0].values()), 1e-15);
}

TEST(Fuse, AttentionRowsAreStochastic) {
  ModelConfig cfg = tiny_config();
  cfg.modalities = 3;
  cfg.raw_dims = {{4, 3}, {5, 2}, {6, 4}};
  ParamStore p = init_params(cfg, 5);
  Rng rng(118);
  RawModalityInput raw = random_raw(rng, cfg, 4);
  BoundParams bound = bind_params(p, nullptr);
  DecoupledFeatures feats = encode(temporal_project(raw, bound, cfg), bound, cfg);
  FuseResult out = fuse(feats, bound, cfg);
  ASSERT_EQ(out.attention_rows.size(), static_cast<size_t>(cfg.modalities * cfg.heads));
  for (const auto& w : out.attention_rows) {
    ASSERT_EQ(w.shape(), (Shape{4, 2}));
    for (int i = 0; i < 4; ++i) {
      double row = 0.0;
      for (int j = 0; j < 2; ++j) {
        EXPECT_GE(w.values()[i * 2 + j], 0.0);
        row += w.values()[i * 2 + j];
      }
      EXPECT_NEAR(row, 1.0, 1e-10);
    }
  }
}

TEST(Fuse, BypassSkipsAttention) {
  ModelConfig cfg = tiny_config();
  ParamStore p = init_params(cfg, 6);
  Rng rng(119);
  RawModalityInput raw = random_raw(rng, cfg, 2);
  BoundParams bound = bind_params(p, nullptr);
  DecoupledFeatures feats = encode(temporal_project(raw, bound, cfg), bound, cfg);
  FuseResult out = fuse(feats, bound, cfg, /*use_attention=*/false);
  EXPECT_TRUE(out.attention_rows.empty());
  for (int m = 0; m < cfg.modalities; ++m) {
    ad::Tensor part = ad::slice(out.fused, 1, m * cfg.d_s, cfg.d_s);
    EXPECT_LT(oracles::max_abs_diff(part.values(), feats.unique[m].values()), 1e-15);
  }
}

TEST(Predict, ZeroWeightsGiveZeroOutputs) {
  ModelConfig cfg = tiny_config();
  ParamStore p = init_params(cfg, 7);
  std::fill(p.at("head.w").value.begin(), p.at("head.w").value.end(), 0.0);
  std::fill(p.at("head.b").value.begin(), p.at("head.b").value.end(), 0.0);
  Rng rng(120);
  RawModalityInput raw = random_raw(rng, cfg, 2);
  BoundParams bound = bind_params(p, nullptr);
  FuseResult out = fuse(encode(temporal_project(raw, bound, cfg), bound, cfg), bound, cfg);
  Prediction pred = predict(out.fused, bound, cfg);
  for (double v : pred.regression.values()) EXPECT_EQ(v, 0.0);
  for (double v : pred.logits.values()) EXPECT_EQ(v, 0.0);
}

TEST(Predict, IdentityHeadOnScalarFeature) {
  ModelConfig cfg;
  cfg.classes = 1;
  ParamStore p;
  p.add("head.w", {1, 2}, {1.0, 0.0});  // regression column copies the feature
  p.add("head.b", {2}, {0.0, 0.0});
  BoundParams bound = bind_params(p, nullptr);
  Tensor fused(Shape{3, 1}, {0.4, -1.2, 2.0});
  Prediction pred = predict(fused, bound, cfg);
  EXPECT_LT(oracles::max_abs_diff(pred.regression.values(), fused.values()), 1e-15);
}

TEST(Forward, DeterministicGivenParamsAndBatch) {
  ModelConfig cfg = tiny_config();
  ParamStore p = init_params(cfg, 8);
  Rng rng(121);
  RawModalityInput raw = random_raw(rng, cfg, 3);
  double a = full_forward_scalar(cfg, p, raw, nullptr, nullptr);
  double b = full_forward_scalar(cfg, p, raw, nullptr, nullptr);
  EXPECT_EQ(a, b);
}

TEST(Forward, PermutingSamplesPermutesOutputs) {
  ModelConfig cfg = tiny_config();
  ParamStore p = init_params(cfg, 9);
  Rng rng(122);
  const int n = 4;
  RawModalityInput raw = random_raw(rng, cfg, n);
  BoundParams bound = bind_params(p, nullptr);
  Prediction pred =
      predict(fuse(encode(temporal_project(raw, bound, cfg), bound, cfg), bound, cfg).fused,
              bound, cfg);

  std::vector<int> perm = {2, 0, 3, 1};
  RawModalityInput shuffled;
  for (int m = 0; m < cfg.modalities; ++m) {
    auto [t, d] = cfg.raw_dims[m];
    std::vector<double> v(static_cast<size_t>(n) * t * d);
    for (int i = 0; i < n; ++i)
      std::copy(raw.x[m].values().begin() + perm[i] * t * d,
                raw.x[m].values().begin() + (perm[i] + 1) * t * d, v.begin() + i * t * d);
    shuffled.x.emplace_back(Shape{n, t, d}, std::move(v));
  }
  Prediction pred2 =
      predict(fuse(encode(temporal_project(shuffled, bound, cfg), bound, cfg), bound, cfg).fused,
              bound, cfg);
  for (int i = 0; i < n; ++i)
    EXPECT_NEAR(pred2.regression.values()[i], pred.regression.values()[perm[i]], 1e-12);
}

TEST(Forward, GradientMatchesFiniteDifferencesOverAllParams) {
  ModelConfig cfg = tiny_config();
  ParamStore p = init_params(cfg, 10);
  Rng rng(123);
  RawModalityInput raw = random_raw(rng, cfg, 2);

  Tape tape;
  BoundParams bound = bind_params(p, &tape);
  ModalityBatch batch = temporal_project(raw, bound, cfg);
  DecoupledFeatures feats = encode(batch, bound, cfg);
  FuseResult fused = fuse(feats, bound, cfg);
  Prediction pred = predict(fused.fused, bound, cfg);
  Tensor loss = ad::add(ad::sum_all(ad::tanh(pred.regression)),
                        ad::sum_all(ad::mul(pred.logits, pred.logits)));
  tape.backward(loss);

  std::vector<double> analytic;
  for (const auto& e : p.entries()) {
    const ad::Tensor& leaf = bound.by_name.at(e.name);
    if (leaf.has_grad()) {
      const auto& g = leaf.grad();
      analytic.insert(analytic.end(), g.begin(), g.end());
    } else {
      // parameters outside this graph (the distribution encoder) have zero grad
      analytic.insert(analytic.end(), e.value.size(), 0.0);
    }
  }
  auto flat = flatten_params(p);
  auto check = oracles::fd_compare(
      [&](const std::vector<double>& v) {
        ParamStore probe = p;
        unflatten_params(probe, v);
        return full_forward_scalar(cfg, probe, raw, nullptr, nullptr);
      },
      flat, analytic);
  EXPECT_LT(check.max_rel_err, 1e-4)
      << "worst " << check.worst_index << " analytic " << check.analytic_at_worst << " fd "
      << check.fd_at_worst;
}

TEST(InitParams, DeterministicAndCounted) {
  ModelConfig cfg = tiny_config();
  ParamStore a = init_params(cfg, 42);
  ParamStore b = init_params(cfg, 42);
  ASSERT_EQ(a.entries().size(), b.entries().size());
  for (size_t i = 0; i < a.entries().size(); ++i) {
    EXPECT_EQ(a.entries()[i].name, b.entries()[i].name);
    EXPECT_EQ(a.entries()[i].value, b.entries()[i].value);
  }
  EXPECT_EQ(a.parameter_count(), b.parameter_count());
  ParamStore c = init_params(cfg, 43);
  EXPECT_NE(a.entries()[0].value, c.entries()[0].value);
}
