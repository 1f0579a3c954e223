// Command-line front end: synthetic data generation, prototype fitting,
// transport alignment, training, evaluation and embedding statistics.
//
// Exit codes: 0 success, 1 IO error, 2 config error, 3 numerical failure
// while fitting, 4 solver non-convergence.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "decalign/decalign.hpp"

namespace fs = std::filesystem;
using namespace decalign;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitIo = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitNoConvergence = 4;

int worker_count(size_t jobs) {
  unsigned hw = std::thread::hardware_concurrency();
  int workers = hw ? static_cast<int>(hw) : 1;
  if (const char* env = std::getenv("DECALIGN_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1) workers = std::min(workers, cap);
  }
  return std::min<int>(workers, static_cast<int>(jobs));
}

int run_generate(const std::string& config_path, const std::string& out_dir,
                 bool no_timestamp) {
  io::RunConfig rc = io::load_run_config(config_path);
  Dataset ds = generate(rc.data);
  io::save_dataset(out_dir, ds, rc, !no_timestamp);
  std::cout << "wrote dataset (" << ds.train.samples() << " train / " << ds.test.samples()
            << " test samples) to " << out_dir << "\n";
  return kExitOk;
}

int run_fit_gmm(const std::string& features_path, int k, uint64_t seed, int max_iters,
                double tol, const std::string& out_path) {
  ad::Tensor feats = io::read_tensor(features_path);
  if (feats.rank() != 2)
    throw InvalidSpec("fit-gmm: features must be a rank-2 tensor, got " +
                      ad::shape_str(feats.shape()));
  linalg::Matrix x(feats.shape()[0], feats.shape()[1], feats.values());
  GmmModel model = fit_gmm(x, k, seed, max_iters, tol);
  io::write_text(out_path, io::gmm_to_json(model).dump(2) + "\n");
  std::cout << "fitted K=" << k << " prototypes on " << x.rows() << " samples, loglik "
            << model.log_likelihood_trace.back() << "\n";
  return kExitOk;
}

int run_align(const std::vector<std::string>& gmm_paths, double lambda, int max_iters,
              double tol, bool uniform, const std::string& out_path) {
  std::vector<GmmModel> models;
  for (const auto& p : gmm_paths) {
    std::ifstream in(p);
    if (!in) throw IoError("align: cannot open " + p);
    json j;
    in >> j;
    models.push_back(io::gmm_from_json(j));
  }
  CostTensor cost = build_cost_tensor(models);
  Marginals nu = uniform ? uniform_marginals(cost.modalities, cost.prototypes)
                         : marginals_from_models(models);
  bool converged = true;
  TransportPlan plan;
  try {
    plan = sinkhorn_mm(cost, nu, lambda, max_iters, tol);
  } catch (const SinkhornNoConvergence& e) {
    std::cerr << "warning: " << e.what() << "\n";
    plan = e.plan;
    converged = false;
  }
  OtObjective obj = ot_objective(plan, cost);
  json out = io::plan_to_json(plan);
  out["converged"] = converged;
  out["transport_cost"] = obj.transport_cost;
  out["entropy_term"] = obj.entropy_term;
  io::write_text(out_path, out.dump(2) + "\n");
  std::cout << "plan residual " << plan.marginal_residual << " after " << plan.iterations_used
            << " sweeps, transport cost " << obj.transport_cost << "\n";
  return converged ? kExitOk : kExitNoConvergence;
}

int run_train(const std::string& config_path, const std::string& out_dir,
              const std::string& seeds_override, bool sweep, bool no_timestamp) {
  io::RunConfig rc = io::load_run_config(config_path);
  if (!seeds_override.empty()) {
    rc.train.seeds.clear();
    std::stringstream ss(seeds_override);
    std::string item;
    while (std::getline(ss, item, ','))
      rc.train.seeds.push_back(std::stoull(item));
    rc.train.validate();
  }
  fs::create_directories(out_dir);
  Dataset ds = generate(rc.data);
  int workers = worker_count(rc.train.seeds.size());

  if (!sweep) {
    std::vector<TrainResult> results = train(rc.train, ds, workers);
    io::write_text(out_dir + "/metrics.csv", io::metrics_csv(results));
    for (const auto& r : results) {
      std::string stem = out_dir + "/checkpoint_seed" + std::to_string(r.history.seed);
      if (rc.checkpoint_format == "binary")
        io::save_checkpoint_binary(stem + ".dckp", r.params, rc);
      else
        io::save_checkpoint_json(stem + ".json", r.params, rc);
      EvalResult ev = evaluate(r.params, rc.train, ds.test);
      json gap = io::gap_to_json(ev.gap);
      gap["config_hash"] = io::config_hash(rc);
      gap["seed"] = r.history.seed;
      if (!no_timestamp) gap["generated_at"] = static_cast<int64_t>(::time(nullptr));
      io::write_text(out_dir + "/modality_gap_seed" + std::to_string(r.history.seed) + ".json",
                     gap.dump(2) + "\n");
      for (const auto& w : r.history.warnings) std::cerr << "warning: " << w << "\n";
      const Metrics& final = r.history.epochs.back().test;
      std::cout << "seed " << r.history.seed << ": mae " << final.mae << " acc2 " << final.acc2
                << " f1 " << final.f1 << "\n";
    }
    return kExitOk;
  }

  // ablation sweep: full model plus the component-removal masks
  struct MaskRow {
    const char* name;
    AblationFlags flags;
  };
  std::vector<MaskRow> masks = {{"full", {}}, {"no_hete", {}}, {"no_homo", {}},
                                {"no_hete_no_homo", {}}};
  masks[1].flags.hete = false;
  masks[2].flags.homo = false;
  masks[3].flags.hete = false;
  masks[3].flags.homo = false;

  std::string csv = "mask,seed,mae,acc2,f1\n";
  for (const auto& mask : masks) {
    io::RunConfig masked = rc;
    masked.train.ablation = mask.flags;
    std::vector<TrainResult> results = train(masked.train, ds, workers);
    for (const auto& r : results) {
      const Metrics& final = r.history.epochs.back().test;
      csv += std::string(mask.name) + "," + std::to_string(r.history.seed) + "," +
             io::format_double(final.mae) + "," + io::format_double(final.acc2) + "," +
             io::format_double(final.f1) + "\n";
      std::cout << mask.name << " seed " << r.history.seed << ": acc2 " << final.acc2 << "\n";
    }
  }
  io::write_text(out_dir + "/sweep.csv", csv);
  return kExitOk;
}

io::Checkpoint load_and_check(const std::string& checkpoint_path, const Dataset& ds) {
  io::Checkpoint ck = io::load_checkpoint(checkpoint_path);
  if (static_cast<int>(ds.test.x.size()) != ck.config.train.model.modalities)
    throw IncompatibleCheckpoint("eval: dataset has " + std::to_string(ds.test.x.size()) +
                                 " modalities, checkpoint expects " +
                                 std::to_string(ck.config.train.model.modalities));
  for (int m = 0; m < ck.config.train.model.modalities; ++m) {
    auto [t, d] = ck.config.train.model.raw_dims[m];
    if (ds.test.x[m].shape()[1] != t || ds.test.x[m].shape()[2] != d)
      throw IncompatibleCheckpoint("eval: modality " + std::to_string(m) + " shape " +
                                   ad::shape_str(ds.test.x[m].shape()) +
                                   " does not match checkpoint");
  }
  return ck;
}

int run_eval(const std::string& checkpoint_path, const std::string& data_dir,
             const std::string& out_path, bool no_timestamp) {
  Dataset ds = io::load_dataset(data_dir);
  io::Checkpoint ck = load_and_check(checkpoint_path, ds);
  EvalResult ev = evaluate(ck.params, ck.config.train, ds.test);
  json out{{"mae", ev.metrics.mae},
           {"acc2", ev.metrics.acc2},
           {"f1", ev.metrics.f1},
           {"per_class_acc", ev.metrics.per_class_acc},
           {"modality_gap", io::gap_to_json(ev.gap)},
           {"config_hash", ck.config_hash}};
  if (!no_timestamp) out["generated_at"] = static_cast<int64_t>(::time(nullptr));
  io::write_text(out_path, out.dump(2) + "\n");
  std::cout << "mae " << ev.metrics.mae << " acc2 " << ev.metrics.acc2 << " f1 "
            << ev.metrics.f1 << "\n";
  return kExitOk;
}

int run_stats(const std::string& checkpoint_path, const std::string& data_dir,
              const std::string& out_path, bool no_timestamp) {
  Dataset ds = io::load_dataset(data_dir);
  io::Checkpoint ck = load_and_check(checkpoint_path, ds);
  BoundParams bound = bind_params(ck.params, nullptr);
  trainer_detail::ForwardResult fwd =
      trainer_detail::forward(ds.test, bound, ck.config.train);
  ModalityGapStats gap = modality_gap_stats(fwd.feats);
  json out = io::gap_to_json(gap);
  out["config_hash"] = ck.config_hash;
  if (!no_timestamp) out["generated_at"] = static_cast<int64_t>(::time(nullptr));
  io::write_text(out_path, out.dump(2) + "\n");
  std::cout << "wrote modality statistics for " << ds.test.x.size() << " modalities\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DecAlign: hierarchical cross-modal alignment on synthetic multimodal data"};
  app.require_subcommand(1);

  std::string config_path, out_path, features_path, checkpoint_path, data_dir, seeds_override;
  std::vector<std::string> gmm_paths;
  int k = 3, max_iters = 100;
  uint64_t seed = 0;
  double tol = 1e-6, lambda = 0.1;
  bool no_timestamp = false, uniform = false, sweep = false;

  auto* gen = app.add_subcommand("generate", "Generate a synthetic multimodal dataset");
  gen->add_option("--config", config_path, "Run configuration JSON")->required();
  gen->add_option("--out", out_path, "Output directory")->required();
  gen->add_flag("--no-timestamp", no_timestamp, "Omit timestamps for byte-identical reruns");

  auto* fit = app.add_subcommand("fit-gmm", "Fit Gaussian mixture prototypes on features");
  fit->add_option("--features", features_path, "Rank-2 feature tensor (.dal)")->required();
  fit->add_option("--k", k, "Component count")->required();
  fit->add_option("--seed", seed, "Fit seed")->required();
  fit->add_option("--out", out_path, "Output JSON file")->required();
  fit->add_option("--max-iters", max_iters, "EM iteration cap");
  fit->add_option("--tol", tol, "Log-likelihood improvement tolerance");

  auto* align = app.add_subcommand("align", "Solve multi-marginal transport across prototypes");
  align->add_option("--gmm", gmm_paths, "Per-modality GMM JSON files")->required()->expected(-2);
  align->add_option("--lambda", lambda, "Entropy weight (relative to normalized costs)");
  align->add_option("--max-iters", max_iters, "Sweep cap");
  align->add_option("--tol", tol, "Marginal residual tolerance");
  align->add_flag("--uniform-marginals", uniform, "Use uniform marginals instead of weights");
  align->add_option("--out", out_path, "Output JSON file")->required();

  auto* tr = app.add_subcommand("train", "Train on synthetic data");
  tr->add_option("--config", config_path, "Run configuration JSON")->required();
  tr->add_option("--out", out_path, "Output directory")->required();
  tr->add_option("--seeds", seeds_override, "Comma-separated seed override");
  tr->add_flag("--sweep", sweep, "Run the component-ablation sweep");
  tr->add_flag("--no-timestamp", no_timestamp, "Omit timestamps for byte-identical reruns");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset directory");
  ev->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  ev->add_option("--data", data_dir, "Dataset directory from `generate`")->required();
  ev->add_option("--out", out_path, "Output JSON file")->required();
  ev->add_flag("--no-timestamp", no_timestamp, "Omit timestamps for byte-identical reruns");

  auto* st = app.add_subcommand("stats", "Dump per-modality embedding statistics");
  st->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  st->add_option("--data", data_dir, "Dataset directory from `generate`")->required();
  st->add_option("--out", out_path, "Output JSON file")->required();
  st->add_flag("--no-timestamp", no_timestamp, "Omit timestamps for byte-identical reruns");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_generate(config_path, out_path, no_timestamp);
    if (fit->parsed()) return run_fit_gmm(features_path, k, seed, max_iters, tol, out_path);
    if (align->parsed())
      return run_align(gmm_paths, lambda, max_iters, tol, uniform, out_path);
    if (tr->parsed()) return run_train(config_path, out_path, seeds_override, sweep, no_timestamp);
    if (ev->parsed()) return run_eval(checkpoint_path, data_dir, out_path, no_timestamp);
    if (st->parsed()) return run_stats(checkpoint_path, data_dir, out_path, no_timestamp);
  } catch (const InvalidSpec& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IncompatibleCheckpoint& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const SinkhornNoConvergence& e) {
    std::cerr << "solver error: " << e.what() << "\n";
    return kExitNoConvergence;
  } catch (const NoConvergenceError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const NotPositiveDefinite& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const EmptyComponent& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const TooFewSamples& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return kExitOk;
}
