#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include "decalign/align_hetero.hpp"
#include "decalign/align_homo.hpp"
#include "decalign/decouple.hpp"
#include "decalign/errors.hpp"
#include "decalign/gmm.hpp"
#include "decalign/mmot.hpp"
#include "decalign/model.hpp"
#include "decalign/rng.hpp"
#include "decalign/tensor.hpp"

namespace decalign {

// ---------------------------------------------------------------------------
// synthetic data

struct ModalityDims {
  int t = 8;
  int d = 16;
};

/// Fully seeded generative recipe. Class identity enters every modality only
/// through the shared latent; the unique component is structured but carries
/// no label information, so it acts as a modality-specific distractor.
struct SyntheticSpec {
  int classes = 3;
  int samples_per_class = 150;
  double shared_strength = 1.0;
  double unique_strength = 1.0;
  double noise = 1.0;
  std::vector<ModalityDims> modalities = {{12, 20}, {10, 14}, {8, 24}};
  uint64_t seed = 7;

  static constexpr int kSharedLatentDim = 8;
  static constexpr int kUniqueLatentDim = 4;

  int total_samples() const { return classes * samples_per_class; }

  void validate() const {
    if (classes < 2) throw InvalidSpec("SyntheticSpec: need at least 2 classes");
    if (samples_per_class < 2) throw InvalidSpec("SyntheticSpec: need at least 2 samples/class");
    if (modalities.empty()) throw InvalidSpec("SyntheticSpec: no modalities");
    for (const auto& m : modalities)
      if (m.t < 1 || m.d < 1) throw InvalidSpec("SyntheticSpec: non-positive modality dims");
    if (shared_strength < 0 || unique_strength < 0 || noise < 0)
      throw InvalidSpec("SyntheticSpec: strengths must be non-negative");
  }
};

/// Continuous target centroid for a class: spread around zero, with both
/// halves pushed off the sign boundary so no centroid sits at zero.
inline double class_score(int c, int classes) {
  double s = static_cast<double>(c) - (classes - 1) / 2.0;
  return s + (s >= 0.0 ? 0.5 : -0.5);
}

struct Dataset {
  RawModalityInput train;
  RawModalityInput test;
};

inline Dataset generate(const SyntheticSpec& spec) {
  spec.validate();
  const int n = spec.total_samples();
  const int m_count = static_cast<int>(spec.modalities.size());
  const int q = SyntheticSpec::kSharedLatentDim;
  const int r = SyntheticSpec::kUniqueLatentDim;
  Rng root(spec.seed);

  // fixed structure: class latents, shared mixing maps, unique bases
  Rng latent_rng = root.fork(1);
  std::vector<std::vector<double>> class_latent(spec.classes);
  for (auto& v : class_latent) v = latent_rng.gaussians(q);

  std::vector<std::vector<double>> shared_map(m_count), unique_basis(m_count);
  for (int m = 0; m < m_count; ++m) {
    int cells = spec.modalities[m].t * spec.modalities[m].d;
    Rng map_rng = root.fork(10 + m);
    shared_map[m] = map_rng.gaussians(static_cast<size_t>(cells) * q);
    for (auto& v : shared_map[m]) v /= std::sqrt(static_cast<double>(q));
    Rng basis_rng = root.fork(100 + m);
    unique_basis[m] = basis_rng.gaussians(static_cast<size_t>(cells) * r);
    for (auto& v : unique_basis[m]) v /= std::sqrt(static_cast<double>(r));
  }

  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) labels[i] = i % spec.classes;

  Rng target_rng = root.fork(2);
  std::vector<double> targets(n);
  for (int i = 0; i < n; ++i)
    targets[i] = class_score(labels[i], spec.classes) + 0.1 * spec.noise * target_rng.next_gaussian();

  std::vector<std::vector<double>> blocks(m_count);
  for (int m = 0; m < m_count; ++m) {
    int cells = spec.modalities[m].t * spec.modalities[m].d;
    blocks[m].assign(static_cast<size_t>(n) * cells, 0.0);
    Rng coeff_rng = root.fork(200 + m);
    Rng noise_rng = root.fork(300 + m);
    for (int i = 0; i < n; ++i) {
      const auto& latent = class_latent[labels[i]];
      std::vector<double> u = coeff_rng.gaussians(r);
      double* row = blocks[m].data() + static_cast<size_t>(i) * cells;
      for (int cell = 0; cell < cells; ++cell) {
        double shared = 0.0;
        for (int a = 0; a < q; ++a) shared += shared_map[m][static_cast<size_t>(cell) * q + a] * latent[a];
        double unique = 0.0;
        for (int a = 0; a < r; ++a) unique += unique_basis[m][static_cast<size_t>(cell) * r + a] * u[a];
        row[cell] = spec.shared_strength * shared + spec.unique_strength * unique +
                    spec.noise * noise_rng.next_gaussian();
      }
    }
  }

  // seeded 70/30 split
  Rng split_rng = root.fork(3);
  std::vector<int> order = split_rng.permutation(n);
  const int n_train = (n * 7) / 10;

  auto subset = [&](int from, int to) {
    RawModalityInput out;
    for (int m = 0; m < m_count; ++m) {
      int cells = spec.modalities[m].t * spec.modalities[m].d;
      std::vector<double> v(static_cast<size_t>(to - from) * cells);
      for (int i = from; i < to; ++i)
        std::copy(blocks[m].begin() + static_cast<size_t>(order[i]) * cells,
                  blocks[m].begin() + static_cast<size_t>(order[i] + 1) * cells,
                  v.begin() + static_cast<size_t>(i - from) * cells);
      out.x.emplace_back(ad::Shape{to - from, spec.modalities[m].t, spec.modalities[m].d},
                         std::move(v));
    }
    for (int i = from; i < to; ++i) {
      out.targets.push_back(targets[order[i]]);
      out.labels.push_back(labels[order[i]]);
    }
    return out;
  };

  Dataset ds;
  ds.train = subset(0, n_train);
  ds.test = subset(n_train, n);
  return ds;
}

// ---------------------------------------------------------------------------
// task loss and metrics

enum class TaskKind { Regression, Classification };

inline ad::Tensor l_task(const Prediction& pred, const std::vector<double>& targets,
                         const std::vector<int>& labels, TaskKind task) {
  if (task == TaskKind::Regression) {
    if (static_cast<int>(targets.size()) != pred.regression.shape()[0])
      throw ShapeMismatch("l_task: " + std::to_string(targets.size()) + " targets for " +
                          std::to_string(pred.regression.shape()[0]) + " predictions");
    ad::Tensor t(ad::Shape{static_cast<int>(targets.size())}, targets);
    ad::Tensor diff = ad::sub(pred.regression, t);
    return ad::mean_all(ad::mul(diff, diff));
  }
  return ad::cross_entropy_logits(pred.logits, labels);
}

struct Metrics {
  double mae = 0.0;
  double acc2 = 0.0;
  double f1 = 0.0;
  std::vector<double> per_class_acc;
};

/// MAE plus sign-based binary accuracy/F1 (negative vs non-negative).
inline Metrics compute_metrics(const std::vector<double>& predictions,
                               const std::vector<double>& targets,
                               const std::vector<int>& labels, int classes) {
  const int n = static_cast<int>(predictions.size());
  if (targets.size() != predictions.size())
    throw ShapeMismatch("compute_metrics: size mismatch");
  Metrics m;
  m.per_class_acc.assign(classes, 0.0);
  std::vector<int> class_counts(classes, 0);
  int tp = 0, fp = 0, fn = 0;
  for (int i = 0; i < n; ++i) {
    m.mae += std::abs(predictions[i] - targets[i]) / n;
    bool pred_pos = predictions[i] >= 0.0;
    bool true_pos = targets[i] >= 0.0;
    bool hit = pred_pos == true_pos;
    m.acc2 += hit ? 1.0 / n : 0.0;
    if (pred_pos && true_pos) ++tp;
    if (pred_pos && !true_pos) ++fp;
    if (!pred_pos && true_pos) ++fn;
    if (!labels.empty()) {
      ++class_counts[labels[i]];
      if (hit) m.per_class_acc[labels[i]] += 1.0;
    }
  }
  for (int c = 0; c < classes; ++c)
    if (class_counts[c] > 0) m.per_class_acc[c] /= class_counts[c];
  double precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  double recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
  m.f1 = precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// configuration

struct AblationFlags {
  bool mfd = true;       // unique/common decoupling (off: single shared encoder)
  bool hete = true;      // heterogeneity alignment incl. cross-attention refinement
  bool homo = true;      // homogeneity alignment
  bool proto_ot = true;  // prototype OT losses within hete
  bool sem = true;       // moment alignment within homo
  bool mmd = true;       // kernel discrepancy within homo
  bool ct = false;       // reserved; no defined semantics, must stay off
};

struct TrainConfig {
  double alpha = 0.05;
  double beta = 0.05;
  double lambda = 0.1;  // OT entropy weight (relative to normalized costs)
  int epochs = 40;
  int batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  TaskKind task = TaskKind::Regression;

  int gmm_refit_every = 1;  // epochs between prototype refits
  int gmm_max_iters = 50;
  double gmm_tol = 1e-5;
  int sinkhorn_max_iters = 500;
  double sinkhorn_tol = 1e-6;
  bool uniform_marginals = false;  // default: GMM mixture weights
  ProtoPairing pairing = ProtoPairing::AllPairs;
  int fixed_target = 0;
  bool differentiate_ot = false;  // no gradient path exists; true is rejected

  KernelConfig kernel;      // median-heuristic biased MMD by default
  bool mmd_on_raw = false;  // bypass the distribution encoder before MMD
  DecoupleMode decouple_mode = DecoupleMode::Squared;
  DecoupleGranularity decouple_granularity = DecoupleGranularity::Rowwise;

  AblationFlags ablation;
  ModelConfig model;  // modalities / raw_dims / classes are filled from the data spec

  void validate() const {
    if (alpha < 0 || beta < 0) throw InvalidSpec("TrainConfig: alpha/beta must be >= 0");
    if (lambda <= 0) throw InvalidSpec("TrainConfig: lambda must be positive");
    if (epochs < 1 || batch_size < 1) throw InvalidSpec("TrainConfig: epochs/batch_size");
    if (learning_rate <= 0) throw InvalidSpec("TrainConfig: learning rate must be positive");
    if (momentum < 0 || momentum >= 1) throw InvalidSpec("TrainConfig: momentum in [0,1)");
    if (seeds.empty()) throw InvalidSpec("TrainConfig: no seeds");
    if (gmm_refit_every < 1) throw InvalidSpec("TrainConfig: gmm_refit_every >= 1");
    if (ablation.ct)
      throw InvalidSpec("TrainConfig: the CT ablation slot is reserved and cannot be enabled");
    if (differentiate_ot)
      throw InvalidSpec(
          "TrainConfig: differentiate_ot is unsupported; prototypes and plans are epoch-level "
          "constants, so the transport term has no per-batch gradient path");
  }
};

/// Named scalar losses for one step. `total` always satisfies
/// total = task + dec + alpha (ot + proto) + beta (sem + mmd),
/// with ablated terms contributing exactly zero.
struct LossReport {
  double task = 0.0;
  double dec = 0.0;
  double ot = 0.0;
  double proto = 0.0;
  double sem = 0.0;
  double mmd = 0.0;
  double total = 0.0;
  int epoch = 0;
  int step = 0;
};

struct EpochRow {
  int epoch = 0;
  LossReport mean_losses;
  Metrics test;
};

struct TrainHistory {
  uint64_t seed = 0;
  std::vector<LossReport> steps;
  std::vector<EpochRow> epochs;
  std::vector<std::string> warnings;
};

struct TrainResult {
  ParamStore params;
  TrainHistory history;
};

// ---------------------------------------------------------------------------
// forward plumbing shared by train and evaluate

namespace trainer_detail {

inline RawModalityInput gather_rows(const RawModalityInput& data, const std::vector<int>& rows) {
  RawModalityInput out;
  for (const auto& block : data.x) {
    int t = block.shape()[1], d = block.shape()[2];
    int cells = t * d;
    std::vector<double> v(static_cast<size_t>(rows.size()) * cells);
    for (size_t i = 0; i < rows.size(); ++i)
      std::copy(block.values().begin() + static_cast<size_t>(rows[i]) * cells,
                block.values().begin() + static_cast<size_t>(rows[i] + 1) * cells,
                v.begin() + i * cells);
    out.x.emplace_back(ad::Shape{static_cast<int>(rows.size()), t, d}, std::move(v));
  }
  for (int r : rows) {
    out.targets.push_back(data.targets[r]);
    out.labels.push_back(data.labels[r]);
  }
  return out;
}

struct ForwardResult {
  DecoupledFeatures feats;
  FuseResult fused;
  Prediction pred;
};

inline ForwardResult forward(const RawModalityInput& raw, const BoundParams& params,
                             const TrainConfig& cfg) {
  ForwardResult out;
  ModalityBatch batch = temporal_project(raw, params, cfg.model);
  if (cfg.ablation.mfd) {
    out.feats = encode(batch, params, cfg.model);
  } else {
    // decoupling off: one shared encoder serves both roles
    for (int m = 0; m < cfg.model.modalities; ++m) {
      ad::Tensor common = ad::mean(model_detail::mlp(batch.x[m], params, "com"), 1);
      out.feats.common.push_back(common);
      out.feats.unique.push_back(common);
    }
  }
  out.fused = fuse(out.feats, params, cfg.model, /*use_attention=*/cfg.ablation.hete);
  out.pred = predict(out.fused.fused, params, cfg.model);
  return out;
}

inline linalg::Matrix features_to_matrix(const ad::Tensor& f) {
  return linalg::Matrix(f.shape()[0], f.shape()[1], f.values());
}

inline uint64_t mix_ids(uint64_t a, uint64_t b) { return a * 0x9e3779b97f4a7c15ULL + b + 1; }

}  // namespace trainer_detail

/// Epoch-level prototype refit: GMMs on current unique features, joint cost,
/// entropic plan. Returns the context plus an optional warning string.
inline HeteroContext refit_prototypes(const RawModalityInput& train_data,
                                      const ParamStore& params, const TrainConfig& cfg,
                                      uint64_t seed, int epoch, std::string* warning) {
  BoundParams bound = bind_params(params, nullptr);
  trainer_detail::ForwardResult fwd = trainer_detail::forward(train_data, bound, cfg);
  HeteroContext ctx;
  for (int m = 0; m < cfg.model.modalities; ++m) {
    linalg::Matrix feats = trainer_detail::features_to_matrix(fwd.feats.unique[m]);
    uint64_t fit_seed = trainer_detail::mix_ids(trainer_detail::mix_ids(seed, epoch), m);
    ctx.models.push_back(
        fit_gmm(feats, cfg.model.classes, fit_seed, cfg.gmm_max_iters, cfg.gmm_tol));
  }
  ctx.cost = build_cost_tensor(ctx.models);
  Marginals nu = cfg.uniform_marginals
                     ? uniform_marginals(cfg.model.modalities, cfg.model.classes)
                     : marginals_from_models(ctx.models);
  try {
    ctx.plan = sinkhorn_mm(ctx.cost, nu, cfg.lambda, cfg.sinkhorn_max_iters, cfg.sinkhorn_tol);
  } catch (const SinkhornNoConvergence& e) {
    if (warning)
      *warning = "epoch " + std::to_string(epoch) + ": " + e.what();
    ctx.plan = e.plan;  // keep the best available plan
  }
  return ctx;
}

/// One full training run. Deterministic function of (config, data, seed).
inline TrainResult train_single(const TrainConfig& cfg, const Dataset& data, uint64_t seed) {
  cfg.validate();
  TrainConfig local = cfg;  // model config gets data-dependent fields
  local.model.modalities = static_cast<int>(data.train.x.size());
  local.model.raw_dims.clear();
  for (const auto& block : data.train.x)
    local.model.raw_dims.emplace_back(block.shape()[1], block.shape()[2]);

  TrainResult result;
  result.params = init_params(local.model, seed);
  result.history.seed = seed;

  const int n_train = data.train.samples();
  // alpha/beta of zero make the weighted terms vanish; skip the work too
  const bool run_hetero = local.ablation.hete && local.ablation.proto_ot && local.alpha > 0;
  const bool run_homo = local.ablation.homo && local.beta > 0;
  HeteroContext ctx;
  Rng shuffle_root = Rng(seed).fork(0x7368756666ULL);

  int step_counter = 0;
  for (int epoch = 0; epoch < local.epochs; ++epoch) {
    std::string warning;
    if (run_hetero && epoch % local.gmm_refit_every == 0) {
      ctx = refit_prototypes(data.train, result.params, local, seed, epoch, &warning);
      if (!warning.empty()) result.history.warnings.push_back(warning);
    }

    Rng epoch_rng = shuffle_root.fork(epoch);
    std::vector<int> order = epoch_rng.permutation(n_train);
    LossReport epoch_mean;
    int batches = 0;

    for (int start = 0; start < n_train;) {
      int end = std::min(start + local.batch_size, n_train);
      if (n_train - end == 1) end = n_train;  // moment statistics need >= 2 samples
      std::vector<int> rows(order.begin() + start, order.begin() + end);
      RawModalityInput raw = trainer_detail::gather_rows(data.train, rows);

      ad::Tape tape;
      BoundParams bound = bind_params(result.params, &tape);
      trainer_detail::ForwardResult fwd = trainer_detail::forward(raw, bound, local);

      LossReport report;
      report.epoch = epoch;
      report.step = step_counter;

      ad::Tensor task = l_task(fwd.pred, raw.targets, raw.labels, local.task);
      report.task = task.value();
      ad::Tensor total = task;

      if (local.ablation.mfd) {
        ad::Tensor dec = l_dec(fwd.feats, local.decouple_mode, local.decouple_granularity);
        report.dec = dec.value();
        total = ad::add(total, dec);
      }
      if (run_hetero) {
        HeteroLoss hl = l_hete(fwd.feats.unique, ctx, local.pairing, local.fixed_target);
        report.ot = hl.ot;
        report.proto = hl.proto.value();
        total = ad::add(total, ad::scale(hl.total, local.alpha));
      }
      if (run_homo && (local.ablation.sem || local.ablation.mmd)) {
        ad::Tensor homo = ad::Tensor::scalar(0.0);
        if (local.ablation.sem) {
          std::vector<MomentStats> stats;
          for (const auto& f : fwd.feats.common) stats.push_back(moments(f));
          ad::Tensor sem = l_sem(stats);
          report.sem = sem.value();
          homo = ad::add(homo, sem);
        }
        if (local.ablation.mmd) {
          std::vector<ad::Tensor> mmd_inputs;
          for (const auto& f : fwd.feats.common)
            mmd_inputs.push_back(local.mmd_on_raw
                                     ? f
                                     : pde_project(f, bound("pde.w"), bound("pde.b")));
          ad::Tensor mmd = l_mmd(mmd_inputs, local.kernel);
          report.mmd = mmd.value();
          homo = ad::add(homo, mmd);
        }
        total = ad::add(total, ad::scale(homo, local.beta));
      }
      report.total = total.value();

      tape.backward(total);
      for (auto& entry : result.params.entries()) {
        const ad::Tensor& leaf = bound.by_name.at(entry.name);
        if (leaf.has_grad()) {
          const auto& g = leaf.grad();
          for (size_t i = 0; i < entry.value.size(); ++i) {
            entry.velocity[i] = local.momentum * entry.velocity[i] + g[i];
            entry.value[i] -= local.learning_rate * entry.velocity[i];
          }
        } else {
          for (size_t i = 0; i < entry.value.size(); ++i) {
            entry.velocity[i] *= local.momentum;
            entry.value[i] -= local.learning_rate * entry.velocity[i];
          }
        }
      }

      start = end;
      result.history.steps.push_back(report);
      epoch_mean.task += report.task;
      epoch_mean.dec += report.dec;
      epoch_mean.ot += report.ot;
      epoch_mean.proto += report.proto;
      epoch_mean.sem += report.sem;
      epoch_mean.mmd += report.mmd;
      epoch_mean.total += report.total;
      ++batches;
      ++step_counter;
    }

    EpochRow row;
    row.epoch = epoch;
    if (batches > 0) {
      epoch_mean.task /= batches;
      epoch_mean.dec /= batches;
      epoch_mean.ot /= batches;
      epoch_mean.proto /= batches;
      epoch_mean.sem /= batches;
      epoch_mean.mmd /= batches;
      epoch_mean.total /= batches;
    }
    epoch_mean.epoch = epoch;
    row.mean_losses = epoch_mean;

    BoundParams eval_bound = bind_params(result.params, nullptr);
    trainer_detail::ForwardResult test_fwd = trainer_detail::forward(data.test, eval_bound, local);
    row.test = compute_metrics(test_fwd.pred.regression.values(), data.test.targets,
                               data.test.labels, local.model.classes);
    result.history.epochs.push_back(row);
  }
  return result;
}

/// Seed sweep. Runs are independent; `workers` only controls scheduling, the
/// results vector is always ordered like cfg.seeds.
inline std::vector<TrainResult> train(const TrainConfig& cfg, const Dataset& data,
                                      int workers = 1) {
  cfg.validate();
  std::vector<TrainResult> results(cfg.seeds.size());
  if (workers <= 1 || cfg.seeds.size() <= 1) {
    for (size_t i = 0; i < cfg.seeds.size(); ++i)
      results[i] = train_single(cfg, data, cfg.seeds[i]);
    return results;
  }
  std::vector<std::thread> pool;
  std::atomic<size_t> next{0};
  int count = std::min<int>(workers, static_cast<int>(cfg.seeds.size()));
  for (int w = 0; w < count; ++w)
    pool.emplace_back([&]() {
      for (size_t i = next.fetch_add(1); i < cfg.seeds.size(); i = next.fetch_add(1))
        results[i] = train_single(cfg, data, cfg.seeds[i]);
    });
  for (auto& t : pool) t.join();
  return results;
}

// ---------------------------------------------------------------------------
// evaluation

struct MomentSummary {
  std::vector<double> mean, cov, skew;
};

struct ModalityGapStats {
  std::vector<MomentSummary> common_moments;            // per modality
  std::vector<std::vector<double>> mean_pair_distance;  // MxM, paired rows
};

struct EvalResult {
  Metrics metrics;
  ModalityGapStats gap;
};

inline ModalityGapStats modality_gap_stats(const DecoupledFeatures& feats) {
  ModalityGapStats out;
  const int m_count = feats.modalities();
  for (int m = 0; m < m_count; ++m) {
    MomentStats s = moments(feats.common[m]);
    out.common_moments.push_back(
        MomentSummary{s.mean.values(), s.cov.values(), s.skew.values()});
  }
  out.mean_pair_distance.assign(m_count, std::vector<double>(m_count, 0.0));
  for (int i = 0; i < m_count; ++i)
    for (int j = 0; j < m_count; ++j) {
      if (i == j) continue;
      const auto& a = feats.common[i].values();
      const auto& b = feats.common[j].values();
      int n = feats.common[i].shape()[0], d = feats.common[i].shape()[1];
      double total = 0.0;
      for (int s = 0; s < n; ++s) {
        double d2 = 0.0;
        for (int k = 0; k < d; ++k) {
          double diff = a[s * d + k] - b[s * d + k];
          d2 += diff * diff;
        }
        total += std::sqrt(d2);
      }
      out.mean_pair_distance[i][j] = total / n;
    }
  return out;
}

inline EvalResult evaluate(const ParamStore& params, const TrainConfig& cfg,
                           const RawModalityInput& test_data) {
  BoundParams bound = bind_params(params, nullptr);
  trainer_detail::ForwardResult fwd = trainer_detail::forward(test_data, bound, cfg);
  EvalResult out;
  out.metrics = compute_metrics(fwd.pred.regression.values(), test_data.targets,
                                test_data.labels, cfg.model.classes);
  out.gap = modality_gap_stats(fwd.feats);
  return out;
}

}  // namespace decalign
