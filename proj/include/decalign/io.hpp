#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "decalign/errors.hpp"
#include "decalign/gmm.hpp"
#include "decalign/mmot.hpp"
#include "decalign/model.hpp"
#include "decalign/trainer.hpp"

namespace decalign::io {

using nlohmann::json;

// ---------------------------------------------------------------------------
// binary tensor dump: magic "DALN", version u32, ndim u32, dims u64[], f64 payload

constexpr uint32_t kTensorFormatVersion = 1;

inline void write_tensor(const std::string& path, const ad::Shape& shape,
                         const std::vector<double>& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_tensor: cannot open " + path);
  out.write("DALN", 4);
  uint32_t version = kTensorFormatVersion;
  uint32_t ndim = static_cast<uint32_t>(shape.size());
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&ndim), 4);
  for (int d : shape) {
    uint64_t v = static_cast<uint64_t>(d);
    out.write(reinterpret_cast<const char*>(&v), 8);
  }
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!out) throw IoError("write_tensor: short write to " + path);
}

inline ad::Tensor read_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_tensor: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "DALN", 4) != 0)
    throw IoError("read_tensor: bad magic in " + path);
  uint32_t version = 0, ndim = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&ndim), 4);
  if (version != kTensorFormatVersion)
    throw IoError("read_tensor: unsupported version " + std::to_string(version));
  ad::Shape shape(ndim);
  int64_t total = 1;
  for (uint32_t i = 0; i < ndim; ++i) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    shape[i] = static_cast<int>(v);
    total *= shape[i];
  }
  std::vector<double> data(static_cast<size_t>(total));
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!in) throw IoError("read_tensor: truncated payload in " + path);
  return ad::Tensor(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// json serializers

inline json gmm_to_json(const GmmModel& m) {
  json covs = json::array();
  for (const auto& c : m.covariances) covs.push_back(c.data());
  return json{{"K", m.components},
              {"pi", m.weights},
              {"means", m.means},
              {"covs", covs},
              {"dim", m.dim()},
              {"log_likelihood_trace", m.log_likelihood_trace}};
}

inline GmmModel gmm_from_json(const json& j) {
  GmmModel m;
  m.components = j.at("K").get<int>();
  m.weights = j.at("pi").get<std::vector<double>>();
  m.means = j.at("means").get<std::vector<std::vector<double>>>();
  int d = j.at("dim").get<int>();
  for (const auto& cov : j.at("covs"))
    m.covariances.emplace_back(d, d, cov.get<std::vector<double>>());
  if (j.contains("log_likelihood_trace"))
    m.log_likelihood_trace = j.at("log_likelihood_trace").get<std::vector<double>>();
  return m;
}

inline json plan_to_json(const TransportPlan& p) {
  ad::Shape shape(p.modalities, p.prototypes);
  return json{{"shape", shape},
              {"values", p.values},
              {"lambda", p.lambda},
              {"marginal_residual", p.marginal_residual},
              {"iterations_used", p.iterations_used}};
}

inline json gap_to_json(const ModalityGapStats& gap) {
  json moments = json::array();
  for (const auto& m : gap.common_moments)
    moments.push_back(json{{"mean", m.mean}, {"cov", m.cov}, {"skew", m.skew}});
  return json{{"common_moments", moments}, {"mean_pair_distance", gap.mean_pair_distance}};
}

// ---------------------------------------------------------------------------
// run configuration: json document mirroring TrainConfig + SyntheticSpec

struct RunConfig {
  TrainConfig train;
  SyntheticSpec data;
  std::string output_dir;
  std::string checkpoint_format = "json";
};

namespace detail {

inline void reject_unknown_keys(const json& j, const std::vector<std::string>& allowed,
                                const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const auto& k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok)
      throw InvalidSpec("config: unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline RunConfig parse_run_config(const json& j) {
  RunConfig rc;
  detail::reject_unknown_keys(j, {"train", "data", "output_dir"}, "document root");

  if (!j.contains("data")) throw InvalidSpec("config: missing required key 'data'");
  {
    const json& d = j.at("data");
    detail::reject_unknown_keys(d,
                                {"classes", "samples_per_class", "shared_strength",
                                 "unique_strength", "noise", "modalities", "seed"},
                                "data");
    for (const char* required : {"classes", "samples_per_class", "modalities", "seed"})
      if (!d.contains(required))
        throw InvalidSpec(std::string("config: missing required key 'data.") + required + "'");
    rc.data.classes = d.at("classes").get<int>();
    rc.data.samples_per_class = d.at("samples_per_class").get<int>();
    rc.data.seed = d.at("seed").get<uint64_t>();
    detail::maybe(d, "shared_strength", rc.data.shared_strength);
    detail::maybe(d, "unique_strength", rc.data.unique_strength);
    detail::maybe(d, "noise", rc.data.noise);
    rc.data.modalities.clear();
    for (const auto& m : d.at("modalities")) {
      detail::reject_unknown_keys(m, {"t", "d"}, "data.modalities[]");
      rc.data.modalities.push_back(ModalityDims{m.at("t").get<int>(), m.at("d").get<int>()});
    }
  }

  TrainConfig& t = rc.train;
  if (j.contains("train")) {
    const json& tr = j.at("train");
    detail::reject_unknown_keys(
        tr, {"alpha", "beta", "lambda", "epochs", "batch_size", "learning_rate", "momentum",
             "seeds", "task", "gmm", "sinkhorn", "marginals", "hetero", "homo", "decouple",
             "ablation", "model", "checkpoint_format"},
        "train");
    detail::maybe(tr, "alpha", t.alpha);
    detail::maybe(tr, "beta", t.beta);
    detail::maybe(tr, "lambda", t.lambda);
    detail::maybe(tr, "epochs", t.epochs);
    detail::maybe(tr, "batch_size", t.batch_size);
    detail::maybe(tr, "learning_rate", t.learning_rate);
    detail::maybe(tr, "momentum", t.momentum);
    detail::maybe(tr, "seeds", t.seeds);
    if (tr.contains("task")) {
      std::string task = tr.at("task").get<std::string>();
      if (task == "regression") t.task = TaskKind::Regression;
      else if (task == "classification") t.task = TaskKind::Classification;
      else throw InvalidSpec("config: train.task must be regression|classification");
    }
    if (tr.contains("gmm")) {
      const json& g = tr.at("gmm");
      detail::reject_unknown_keys(g, {"refit_every", "max_iters", "tol"}, "train.gmm");
      detail::maybe(g, "refit_every", t.gmm_refit_every);
      detail::maybe(g, "max_iters", t.gmm_max_iters);
      detail::maybe(g, "tol", t.gmm_tol);
    }
    if (tr.contains("sinkhorn")) {
      const json& s = tr.at("sinkhorn");
      detail::reject_unknown_keys(s, {"max_iters", "tol"}, "train.sinkhorn");
      detail::maybe(s, "max_iters", t.sinkhorn_max_iters);
      detail::maybe(s, "tol", t.sinkhorn_tol);
    }
    if (tr.contains("marginals")) {
      std::string m = tr.at("marginals").get<std::string>();
      if (m == "weights") t.uniform_marginals = false;
      else if (m == "uniform") t.uniform_marginals = true;
      else throw InvalidSpec("config: train.marginals must be weights|uniform");
    }
    if (tr.contains("hetero")) {
      const json& h = tr.at("hetero");
      detail::reject_unknown_keys(h, {"pairing", "fixed_target", "differentiate_ot"},
                                  "train.hetero");
      if (h.contains("pairing")) {
        std::string p = h.at("pairing").get<std::string>();
        if (p == "all-pairs") t.pairing = ProtoPairing::AllPairs;
        else if (p == "fixed-target") t.pairing = ProtoPairing::FixedTarget;
        else throw InvalidSpec("config: train.hetero.pairing must be all-pairs|fixed-target");
      }
      detail::maybe(h, "fixed_target", t.fixed_target);
      detail::maybe(h, "differentiate_ot", t.differentiate_ot);
    }
    if (tr.contains("homo")) {
      const json& h = tr.at("homo");
      detail::reject_unknown_keys(h, {"estimator", "bandwidth", "mmd_on_raw"}, "train.homo");
      if (h.contains("estimator")) {
        std::string e = h.at("estimator").get<std::string>();
        if (e == "biased") t.kernel.estimator = MmdEstimator::Biased;
        else if (e == "unbiased") t.kernel.estimator = MmdEstimator::Unbiased;
        else throw InvalidSpec("config: train.homo.estimator must be biased|unbiased");
      }
      if (h.contains("bandwidth")) {
        if (h.at("bandwidth").is_string()) {
          if (h.at("bandwidth").get<std::string>() != "median-heuristic")
            throw InvalidSpec("config: train.homo.bandwidth must be a number or median-heuristic");
          t.kernel.bandwidth = 0.0;
        } else {
          t.kernel.bandwidth = h.at("bandwidth").get<double>();
          if (t.kernel.bandwidth <= 0)
            throw InvalidSpec("config: train.homo.bandwidth must be positive");
        }
      }
      detail::maybe(h, "mmd_on_raw", t.mmd_on_raw);
    }
    if (tr.contains("decouple")) {
      const json& d = tr.at("decouple");
      detail::reject_unknown_keys(d, {"mode", "granularity"}, "train.decouple");
      if (d.contains("mode")) {
        std::string m = d.at("mode").get<std::string>();
        if (m == "squared") t.decouple_mode = DecoupleMode::Squared;
        else if (m == "paper-literal") t.decouple_mode = DecoupleMode::PaperLiteral;
        else throw InvalidSpec("config: train.decouple.mode must be squared|paper-literal");
      }
      if (d.contains("granularity")) {
        std::string g = d.at("granularity").get<std::string>();
        if (g == "rowwise") t.decouple_granularity = DecoupleGranularity::Rowwise;
        else if (g == "flatten") t.decouple_granularity = DecoupleGranularity::Flatten;
        else throw InvalidSpec("config: train.decouple.granularity must be rowwise|flatten");
      }
    }
    if (tr.contains("ablation")) {
      const json& a = tr.at("ablation");
      detail::reject_unknown_keys(a, {"mfd", "hete", "homo", "proto_ot", "sem", "mmd", "ct"},
                                  "train.ablation");
      detail::maybe(a, "mfd", t.ablation.mfd);
      detail::maybe(a, "hete", t.ablation.hete);
      detail::maybe(a, "homo", t.ablation.homo);
      detail::maybe(a, "proto_ot", t.ablation.proto_ot);
      detail::maybe(a, "sem", t.ablation.sem);
      detail::maybe(a, "mmd", t.ablation.mmd);
      detail::maybe(a, "ct", t.ablation.ct);
    }
    if (tr.contains("model")) {
      const json& m = tr.at("model");
      detail::reject_unknown_keys(m, {"d_s", "t_s", "hidden", "heads", "conv_width"},
                                  "train.model");
      detail::maybe(m, "d_s", t.model.d_s);
      detail::maybe(m, "t_s", t.model.t_s);
      detail::maybe(m, "hidden", t.model.hidden);
      detail::maybe(m, "heads", t.model.heads);
      detail::maybe(m, "conv_width", t.model.conv_width);
    }
    if (tr.contains("checkpoint_format")) {
      rc.checkpoint_format = tr.at("checkpoint_format").get<std::string>();
      if (rc.checkpoint_format != "json" && rc.checkpoint_format != "binary")
        throw InvalidSpec("config: train.checkpoint_format must be json|binary");
    }
  }
  detail::maybe(j, "output_dir", rc.output_dir);

  // data-derived model fields
  t.model.modalities = static_cast<int>(rc.data.modalities.size());
  t.model.classes = rc.data.classes;
  t.model.raw_dims.clear();
  for (const auto& m : rc.data.modalities) t.model.raw_dims.emplace_back(m.t, m.d);

  rc.data.validate();
  t.validate();
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InvalidSpec("config: parse error in " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

/// Canonical round-trip of the configuration (defaults filled in).
inline json run_config_to_json(const RunConfig& rc) {
  const TrainConfig& t = rc.train;
  json modalities = json::array();
  for (const auto& m : rc.data.modalities) modalities.push_back(json{{"t", m.t}, {"d", m.d}});
  return json{
      {"train",
       {{"alpha", t.alpha},
        {"beta", t.beta},
        {"lambda", t.lambda},
        {"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"learning_rate", t.learning_rate},
        {"momentum", t.momentum},
        {"seeds", t.seeds},
        {"task", t.task == TaskKind::Regression ? "regression" : "classification"},
        {"gmm",
         {{"refit_every", t.gmm_refit_every}, {"max_iters", t.gmm_max_iters}, {"tol", t.gmm_tol}}},
        {"sinkhorn", {{"max_iters", t.sinkhorn_max_iters}, {"tol", t.sinkhorn_tol}}},
        {"marginals", t.uniform_marginals ? "uniform" : "weights"},
        {"hetero",
         {{"pairing", t.pairing == ProtoPairing::AllPairs ? "all-pairs" : "fixed-target"},
          {"fixed_target", t.fixed_target},
          {"differentiate_ot", t.differentiate_ot}}},
        {"homo",
         {{"estimator", t.kernel.estimator == MmdEstimator::Biased ? "biased" : "unbiased"},
          {"bandwidth",
           t.kernel.bandwidth > 0 ? json(t.kernel.bandwidth) : json("median-heuristic")},
          {"mmd_on_raw", t.mmd_on_raw}}},
        {"decouple",
         {{"mode", t.decouple_mode == DecoupleMode::Squared ? "squared" : "paper-literal"},
          {"granularity",
           t.decouple_granularity == DecoupleGranularity::Rowwise ? "rowwise" : "flatten"}}},
        {"ablation",
         {{"mfd", t.ablation.mfd},
          {"hete", t.ablation.hete},
          {"homo", t.ablation.homo},
          {"proto_ot", t.ablation.proto_ot},
          {"sem", t.ablation.sem},
          {"mmd", t.ablation.mmd},
          {"ct", t.ablation.ct}}},
        {"model",
         {{"d_s", t.model.d_s},
          {"t_s", t.model.t_s},
          {"hidden", t.model.hidden},
          {"heads", t.model.heads},
          {"conv_width", t.model.conv_width}}},
        {"checkpoint_format", rc.checkpoint_format}}},
      {"data",
       {{"classes", rc.data.classes},
        {"samples_per_class", rc.data.samples_per_class},
        {"shared_strength", rc.data.shared_strength},
        {"unique_strength", rc.data.unique_strength},
        {"noise", rc.data.noise},
        {"modalities", modalities},
        {"seed", rc.data.seed}}},
      {"output_dir", rc.output_dir}};
}

/// FNV-1a over the canonical dump; embedded in every output file.
inline uint64_t config_hash(const RunConfig& rc) {
  std::string s = run_config_to_json(rc).dump();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// dataset directory

inline void save_dataset(const std::string& dir, const Dataset& ds, const RunConfig& rc,
                         bool with_timestamp) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json files = json::array();
  auto dump_split = [&](const RawModalityInput& split, const std::string& prefix) {
    for (size_t m = 0; m < split.x.size(); ++m) {
      std::string name = prefix + "_m" + std::to_string(m) + ".dal";
      write_tensor(dir + "/" + name, split.x[m].shape(), split.x[m].values());
      files.push_back(json{{"file", name},
                           {"shape", split.x[m].shape()},
                           {"role", prefix},
                           {"modality", m}});
    }
    std::vector<double> labels_f(split.labels.begin(), split.labels.end());
    write_tensor(dir + "/" + prefix + "_targets.dal", {split.samples()}, split.targets);
    write_tensor(dir + "/" + prefix + "_labels.dal", {split.samples()}, labels_f);
    files.push_back(json{{"file", prefix + "_targets.dal"}, {"shape", ad::Shape{split.samples()}},
                         {"role", prefix + "_targets"}});
    files.push_back(json{{"file", prefix + "_labels.dal"}, {"shape", ad::Shape{split.samples()}},
                         {"role", prefix + "_labels"}});
  };
  dump_split(ds.train, "train");
  dump_split(ds.test, "test");
  json manifest{{"config_hash", config_hash(rc)},
                {"classes", rc.data.classes},
                {"train_samples", ds.train.samples()},
                {"test_samples", ds.test.samples()},
                {"files", files}};
  if (with_timestamp) manifest["generated_at"] = static_cast<int64_t>(::time(nullptr));
  std::ofstream out(dir + "/manifest.json");
  if (!out) throw IoError("save_dataset: cannot write manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw IoError("load_dataset: cannot open " + dir + "/manifest.json");
  json manifest;
  in >> manifest;
  Dataset ds;
  auto load_split = [&](RawModalityInput& split, const std::string& prefix) {
    for (const auto& f : manifest.at("files")) {
      if (f.at("role") != prefix) continue;
      split.x.push_back(read_tensor(dir + "/" + f.at("file").get<std::string>()));
    }
    ad::Tensor targets = read_tensor(dir + "/" + prefix + "_targets.dal");
    ad::Tensor labels = read_tensor(dir + "/" + prefix + "_labels.dal");
    split.targets = targets.values();
    for (double v : labels.values()) split.labels.push_back(static_cast<int>(v));
  };
  load_split(ds.train, "train");
  load_split(ds.test, "test");
  return ds;
}

// ---------------------------------------------------------------------------
// checkpoints

constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint_json(const std::string& path, const ParamStore& params,
                                 const RunConfig& rc) {
  json entries = json::array();
  for (const auto& e : params.entries())
    entries.push_back(json{{"name", e.name}, {"shape", e.shape}, {"values", e.value}});
  json j{{"version", kCheckpointVersion},
         {"config_hash", config_hash(rc)},
         {"config", run_config_to_json(rc)},
         {"params", entries}};
  std::ofstream out(path);
  if (!out) throw IoError("save_checkpoint: cannot open " + path);
  out << j.dump() << "\n";
}

inline void save_checkpoint_binary(const std::string& path, const ParamStore& params,
                                   const RunConfig& rc) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot open " + path);
  out.write("DCKP", 4);
  uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), 4);
  uint64_t hash = config_hash(rc);
  out.write(reinterpret_cast<const char*>(&hash), 8);
  std::string cfg = run_config_to_json(rc).dump();
  uint64_t cfg_len = cfg.size();
  out.write(reinterpret_cast<const char*>(&cfg_len), 8);
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  uint32_t count = static_cast<uint32_t>(params.entries().size());
  out.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto& e : params.entries()) {
    uint32_t name_len = static_cast<uint32_t>(e.name.size());
    out.write(reinterpret_cast<const char*>(&name_len), 4);
    out.write(e.name.data(), name_len);
    uint32_t ndim = static_cast<uint32_t>(e.shape.size());
    out.write(reinterpret_cast<const char*>(&ndim), 4);
    for (int d : e.shape) {
      uint64_t v = static_cast<uint64_t>(d);
      out.write(reinterpret_cast<const char*>(&v), 8);
    }
    out.write(reinterpret_cast<const char*>(e.value.data()),
              static_cast<std::streamsize>(e.value.size() * sizeof(double)));
  }
  if (!out) throw IoError("save_checkpoint: short write to " + path);
}

struct Checkpoint {
  ParamStore params;
  RunConfig config;
  uint64_t config_hash = 0;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("load_checkpoint: cannot open " + path);
  char magic[4] = {0, 0, 0, 0};
  probe.read(magic, 4);
  Checkpoint ck;
  if (std::memcmp(magic, "DCKP", 4) == 0) {
    uint32_t version = 0;
    probe.read(reinterpret_cast<char*>(&version), 4);
    if (version != kCheckpointVersion)
      throw IncompatibleCheckpoint("load_checkpoint: version " + std::to_string(version));
    probe.read(reinterpret_cast<char*>(&ck.config_hash), 8);
    uint64_t cfg_len = 0;
    probe.read(reinterpret_cast<char*>(&cfg_len), 8);
    std::string cfg(cfg_len, '\0');
    probe.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
    ck.config = parse_run_config(json::parse(cfg));
    uint32_t count = 0;
    probe.read(reinterpret_cast<char*>(&count), 4);
    for (uint32_t i = 0; i < count; ++i) {
      uint32_t name_len = 0;
      probe.read(reinterpret_cast<char*>(&name_len), 4);
      std::string name(name_len, '\0');
      probe.read(name.data(), name_len);
      uint32_t ndim = 0;
      probe.read(reinterpret_cast<char*>(&ndim), 4);
      ad::Shape shape(ndim);
      int64_t total = 1;
      for (uint32_t d = 0; d < ndim; ++d) {
        uint64_t v = 0;
        probe.read(reinterpret_cast<char*>(&v), 8);
        shape[d] = static_cast<int>(v);
        total *= shape[d];
      }
      std::vector<double> values(static_cast<size_t>(total));
      probe.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(double)));
      ck.params.add(name, shape, std::move(values));
    }
    if (!probe) throw IoError("load_checkpoint: truncated " + path);
    return ck;
  }

  std::ifstream in(path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IncompatibleCheckpoint("load_checkpoint: not a checkpoint: " + std::string(e.what()));
  }
  if (j.at("version").get<uint32_t>() != kCheckpointVersion)
    throw IncompatibleCheckpoint("load_checkpoint: version mismatch");
  ck.config_hash = j.at("config_hash").get<uint64_t>();
  ck.config = parse_run_config(j.at("config"));
  for (const auto& e : j.at("params"))
    ck.params.add(e.at("name").get<std::string>(), e.at("shape").get<ad::Shape>(),
                  e.at("values").get<std::vector<double>>());
  return ck;
}

// ---------------------------------------------------------------------------
// metrics csv

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// One row per (seed, epoch): epoch-mean losses plus test metrics.
inline std::string metrics_csv(const std::vector<TrainResult>& results) {
  std::string out =
      "seed,epoch,loss_task,loss_dec,loss_ot,loss_proto,loss_sem,loss_mmd,loss_total,mae,acc2,"
      "f1\n";
  for (const auto& r : results) {
    for (const auto& row : r.history.epochs) {
      const LossReport& l = row.mean_losses;
      out += std::to_string(r.history.seed) + "," + std::to_string(row.epoch) + "," +
             format_double(l.task) + "," + format_double(l.dec) + "," + format_double(l.ot) +
             "," + format_double(l.proto) + "," + format_double(l.sem) + "," +
             format_double(l.mmd) + "," + format_double(l.total) + "," +
             format_double(row.test.mae) + "," + format_double(row.test.acc2) + "," +
             format_double(row.test.f1) + "\n";
    }
  }
  return out;
}

inline void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_text: cannot open " + path);
  out << content;
}

}  // namespace decalign::io
