#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cnf/data.hpp"
#include "cnf/errors.hpp"
#include "cnf/noise.hpp"
#include "cnf/pruning.hpp"
#include "cnf/sgd.hpp"

namespace cnf {

using json = nlohmann::json;

struct DataConfig {
  std::string source = "synthetic";  // synthetic | binary
  SyntheticSpec synthetic;
  std::string path;  // binary record file
  RecordLayout layout;
  std::vector<double> split{0.6, 0.2, 0.2};  // train, validation, test
  std::uint64_t split_seed = 7;
  AugmentConfig augment;
  bool augment_train = true;
};

struct PruneConfig {
  bool enabled = false;
  Strategy strategy = Strategy::Iterative;
  double sparsity = 0.05;
  Criterion criterion = Criterion::Magnitude;
  std::string gradient_source = "validation";  // validation | train | test
  int gradient_batches = 0;                    // 0 = whole split
  bool cascade_counts = true;
  WeightBase weight_base = WeightBase::PostLinkPruning;
  std::vector<int> epochs;  // empty = strategy defaults
};

struct NoiseConfig {
  std::string type = "none";  // none | uniform | class | annotator
  double rate = 0.1;          // flip probability, or target annotator error
  std::string matrix = "pair";  // class noise: pair | symmetric
  std::uint64_t seed = 11;
  AnnotatorConfig annotator;
  // annotator noise: cross_fit relabels each fold with a model that never
  // trained on it; train_split trains on the train split and relabels everything
  std::string policy = "cross_fit";
  int folds = 2;
};

struct ExperimentConfig {
  int layers = 8;
  int channels = 64;
  int epochs = 200;
  int reference_epochs = 200;  // epoch count the milestones and prune epochs refer to
  std::vector<int> lr_milestones{80, 120};
  SgdConfig sgd{0.1, 0.0, 0.0};
  int batch_size = 64;
  std::uint64_t seed = 1;
  DataConfig data;
  PruneConfig prune;
  NoiseConfig noise;
  std::string out = "run";

  void validate() const;
};

// ---------------------------------------------------------------------------
// Enum spellings
// ---------------------------------------------------------------------------

inline Strategy parse_strategy(const std::string& s) {
  if (s == "early") return Strategy::Early;
  if (s == "late") return Strategy::Late;
  if (s == "iterative") return Strategy::Iterative;
  throw InputError("unknown strategy '" + s + "' (early, late, iterative)");
}

inline Criterion parse_criterion(const std::string& s) {
  if (s == "magnitude") return Criterion::Magnitude;
  if (s == "sensitivity") return Criterion::Sensitivity;
  throw InputError("unknown criterion '" + s + "' (magnitude, sensitivity)");
}

inline std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Early: return "early";
    case Strategy::Late: return "late";
    case Strategy::Iterative: return "iterative";
  }
  return "?";
}

inline std::string criterion_name(Criterion c) { return c == Criterion::Magnitude ? "magnitude" : "sensitivity"; }

inline void ExperimentConfig::validate() const {
  if (layers < 2) throw InputError("config: layers must be at least 2");
  if (channels < 1) throw InputError("config: channels must be positive");
  if (epochs < 0) throw InputError("config: epochs must be nonnegative");
  if (reference_epochs < 1) throw InputError("config: reference_epochs must be positive");
  if (batch_size < 2) throw InputError("config: batch_size must be at least 2");
  for (std::size_t i = 1; i < lr_milestones.size(); ++i)
    if (lr_milestones[i] < lr_milestones[i - 1]) throw InputError("config: lr milestones must be sorted");
  sgd.validate();
  if (data.source != "synthetic" && data.source != "binary")
    throw InputError("config: data.source must be synthetic or binary");
  if (data.source == "binary" && data.path.empty()) throw InputError("config: data.path required for binary data");
  if (data.split.size() != 3) throw InputError("config: data.split needs train, validation and test fractions");
  if (prune.enabled) {
    sparsity_ppm(prune.sparsity);
    if (prune.gradient_source != "validation" && prune.gradient_source != "train" && prune.gradient_source != "test")
      throw InputError("config: prune.gradient_source must be validation, train or test");
    for (std::size_t i = 1; i < prune.epochs.size(); ++i)
      if (prune.epochs[i] < prune.epochs[i - 1]) throw InputError("config: prune epochs must be sorted");
  }
  const auto& n = noise.type;
  if (n != "none" && n != "uniform" && n != "class" && n != "annotator")
    throw InputError("config: noise.type must be none, uniform, class or annotator");
  if (n == "class" && noise.matrix != "pair" && noise.matrix != "symmetric")
    throw InputError("config: noise.matrix must be pair or symmetric");
  if (n == "annotator" && noise.policy != "cross_fit" && noise.policy != "train_split")
    throw InputError("config: noise.policy must be cross_fit or train_split");
  if (n == "annotator" && noise.folds < 2) throw InputError("config: noise.folds must be at least 2");
  if (n != "none" && !(noise.rate >= 0 && noise.rate < 1)) throw InputError("config: noise.rate must lie in [0,1)");
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

namespace detail {

// Reads `key` into `dst` when present; leaves the default otherwise.
template <typename V>
void read_opt(const json& j, const char* key, V& dst) {
  if (auto it = j.find(key); it != j.end()) it->get_to(dst);
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw InputError("config: " + where + " must be an object");
  std::set<std::string> known(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw InputError("config: unknown key '" + where + (where.empty() ? "" : ".") + k + "'");
}

}  // namespace detail

inline json to_json(const AugmentConfig& a) {
  return {{"mean", a.mean}, {"std", a.stddev},         {"resize", a.resize},
          {"crop", a.crop}, {"padding", a.padding}, {"flip_prob", a.flip_prob}};
}

inline AugmentConfig augment_from_json(const json& j) {
  detail::reject_unknown(j, {"mean", "std", "resize", "crop", "padding", "flip_prob"}, "augment");
  AugmentConfig a;
  detail::read_opt(j, "mean", a.mean);
  detail::read_opt(j, "std", a.stddev);
  detail::read_opt(j, "resize", a.resize);
  detail::read_opt(j, "crop", a.crop);
  detail::read_opt(j, "padding", a.padding);
  detail::read_opt(j, "flip_prob", a.flip_prob);
  return a;
}

inline json to_json(const SgdConfig& s) {
  return {{"learning_rate", s.learning_rate}, {"momentum", s.momentum}, {"weight_decay", s.weight_decay}};
}

inline SgdConfig sgd_from_json(const json& j, SgdConfig s) {
  detail::reject_unknown(j, {"learning_rate", "momentum", "weight_decay"}, "sgd");
  detail::read_opt(j, "learning_rate", s.learning_rate);
  detail::read_opt(j, "momentum", s.momentum);
  detail::read_opt(j, "weight_decay", s.weight_decay);
  return s;
}

inline json to_json(const ExperimentConfig& c) {
  const auto& d = c.data;
  const auto& p = c.prune;
  const auto& n = c.noise;
  const auto& a = n.annotator;
  return {
      {"layers", c.layers},
      {"channels", c.channels},
      {"epochs", c.epochs},
      {"reference_epochs", c.reference_epochs},
      {"lr_milestones", c.lr_milestones},
      {"sgd", to_json(c.sgd)},
      {"batch_size", c.batch_size},
      {"seed", c.seed},
      {"out", c.out},
      {"data",
       {{"source", d.source},
        {"synthetic",
         {{"classes", d.synthetic.classes},
          {"per_class", d.synthetic.per_class},
          {"resolution", d.synthetic.resolution},
          {"difficulty", d.synthetic.difficulty},
          {"seed", d.synthetic.seed}}},
        {"path", d.path},
        {"layout",
         {{"channels", d.layout.channels}, {"resolution", d.layout.resolution}, {"classes", d.layout.classes}}},
        {"split", d.split},
        {"split_seed", d.split_seed},
        {"augment", to_json(d.augment)},
        {"augment_train", d.augment_train}}},
      {"prune",
       {{"enabled", p.enabled},
        {"strategy", strategy_name(p.strategy)},
        {"sparsity", p.sparsity},
        {"criterion", criterion_name(p.criterion)},
        {"gradient_source", p.gradient_source},
        {"gradient_batches", p.gradient_batches},
        {"cascade_counts", p.cascade_counts},
        {"weight_base", p.weight_base == WeightBase::PostLinkPruning ? "post_link" : "pre_link"},
        {"epochs", p.epochs}}},
      {"noise",
       {{"type", n.type},
        {"rate", n.rate},
        {"matrix", n.matrix},
        {"seed", n.seed},
        {"policy", n.policy},
        {"folds", n.folds},
        {"annotator",
         {{"layers", a.layers},
          {"channels", a.channels},
          {"sgd", to_json(a.sgd)},
          {"batch_size", a.batch_size},
          {"max_epochs", a.max_epochs},
          {"band", a.band},
          {"evals_per_epoch", a.evals_per_epoch},
          {"augment", a.augment},
          {"seed", a.seed}}}}},
  };
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline ExperimentConfig config_from_json(const json& j) {
  using detail::read_opt;
  detail::reject_unknown(j,
                         {"layers", "channels", "epochs", "reference_epochs", "lr_milestones", "sgd", "batch_size",
                          "seed", "out", "data", "prune", "noise"},
                         "");
  ExperimentConfig c;
  read_opt(j, "layers", c.layers);
  read_opt(j, "channels", c.channels);
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "reference_epochs", c.reference_epochs);
  read_opt(j, "lr_milestones", c.lr_milestones);
  if (j.contains("sgd")) c.sgd = sgd_from_json(j["sgd"], c.sgd);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "seed", c.seed);
  read_opt(j, "out", c.out);

  if (j.contains("data")) {
    const json& d = j["data"];
    detail::reject_unknown(d, {"source", "synthetic", "path", "layout", "split", "split_seed", "augment", "augment_train"},
                           "data");
    read_opt(d, "source", c.data.source);
    if (d.contains("synthetic")) {
      const json& s = d["synthetic"];
      detail::reject_unknown(s, {"classes", "per_class", "resolution", "difficulty", "seed"}, "data.synthetic");
      read_opt(s, "classes", c.data.synthetic.classes);
      read_opt(s, "per_class", c.data.synthetic.per_class);
      read_opt(s, "resolution", c.data.synthetic.resolution);
      read_opt(s, "difficulty", c.data.synthetic.difficulty);
      read_opt(s, "seed", c.data.synthetic.seed);
    }
    read_opt(d, "path", c.data.path);
    if (d.contains("layout")) {
      const json& l = d["layout"];
      detail::reject_unknown(l, {"channels", "resolution", "classes"}, "data.layout");
      read_opt(l, "channels", c.data.layout.channels);
      read_opt(l, "resolution", c.data.layout.resolution);
      read_opt(l, "classes", c.data.layout.classes);
    }
    read_opt(d, "split", c.data.split);
    read_opt(d, "split_seed", c.data.split_seed);
    if (d.contains("augment")) c.data.augment = augment_from_json(d["augment"]);
    read_opt(d, "augment_train", c.data.augment_train);
  }

  if (j.contains("prune")) {
    const json& p = j["prune"];
    detail::reject_unknown(p,
                           {"enabled", "strategy", "sparsity", "criterion", "gradient_source", "gradient_batches",
                            "cascade_counts", "weight_base", "epochs"},
                           "prune");
    read_opt(p, "enabled", c.prune.enabled);
    if (p.contains("strategy")) c.prune.strategy = parse_strategy(p["strategy"].get<std::string>());
    read_opt(p, "sparsity", c.prune.sparsity);
    if (p.contains("criterion")) c.prune.criterion = parse_criterion(p["criterion"].get<std::string>());
    read_opt(p, "gradient_source", c.prune.gradient_source);
    read_opt(p, "gradient_batches", c.prune.gradient_batches);
    read_opt(p, "cascade_counts", c.prune.cascade_counts);
    if (p.contains("weight_base")) {
      const auto wb = p["weight_base"].get<std::string>();
      if (wb == "post_link")
        c.prune.weight_base = WeightBase::PostLinkPruning;
      else if (wb == "pre_link")
        c.prune.weight_base = WeightBase::PreLinkPruning;
      else
        throw InputError("config: prune.weight_base must be post_link or pre_link");
    }
    read_opt(p, "epochs", c.prune.epochs);
  }

  if (j.contains("noise")) {
    const json& n = j["noise"];
    detail::reject_unknown(n, {"type", "rate", "matrix", "seed", "policy", "folds", "annotator"}, "noise");
    read_opt(n, "type", c.noise.type);
    read_opt(n, "rate", c.noise.rate);
    read_opt(n, "matrix", c.noise.matrix);
    read_opt(n, "seed", c.noise.seed);
    read_opt(n, "policy", c.noise.policy);
    read_opt(n, "folds", c.noise.folds);
    if (n.contains("annotator")) {
      const json& a = n["annotator"];
      auto& ac = c.noise.annotator;
      detail::reject_unknown(
          a, {"layers", "channels", "sgd", "batch_size", "max_epochs", "band", "evals_per_epoch", "augment", "seed"},
          "noise.annotator");
      read_opt(a, "layers", ac.layers);
      read_opt(a, "channels", ac.channels);
      if (a.contains("sgd")) ac.sgd = sgd_from_json(a["sgd"], ac.sgd);
      read_opt(a, "batch_size", ac.batch_size);
      read_opt(a, "max_epochs", ac.max_epochs);
      read_opt(a, "band", ac.band);
      read_opt(a, "evals_per_epoch", ac.evals_per_epoch);
      read_opt(a, "augment", ac.augment);
      read_opt(a, "seed", ac.seed);
    }
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  try {
    return config_from_json(j);
  } catch (const json::type_error& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

/// FNV-1a 64 over the canonical (sorted-key, compact) serialization,
/// output directory excluded.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("out");
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

/// base_lr divided by 10 for each milestone the epoch is past.
inline double lr_at(int epoch, double base_lr, std::span<const int> milestones) {
  double lr = base_lr;
  for (int m : milestones)
    if (epoch > m) lr /= 10.0;
  return lr;
}

/// Proportional rescale, rounding half up, clamped to [1, total].
inline int rescale_epoch(int epoch, int reference, int total) {
  const long long num = 2LL * epoch * total + reference;
  const long long r = num / (2LL * reference);
  return static_cast<int>(std::clamp<long long>(r, 1, total));
}

/// Rescales lr milestones and prune epochs from reference_epochs to total_epochs.
inline ExperimentConfig scale_schedule(const ExperimentConfig& config, int total_epochs) {
  if (total_epochs < 1) throw InputError("scale_schedule: total epochs must be at least 1");
  ExperimentConfig c = config;
  c.epochs = total_epochs;
  if (total_epochs == config.reference_epochs) return c;
  const int ref = config.reference_epochs;
  for (int& m : c.lr_milestones) m = rescale_epoch(m, ref, total_epochs);
  if (c.prune.epochs.empty()) c.prune.epochs = default_prune_epochs(c.prune.strategy);
  for (int& e : c.prune.epochs) e = rescale_epoch(e, ref, total_epochs);
  c.reference_epochs = total_epochs;
  return c;
}

}  // namespace cnf
