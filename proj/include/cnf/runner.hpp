#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cnf/checkpoint.hpp"
#include "cnf/config.hpp"
#include "cnf/data.hpp"
#include "cnf/fabric.hpp"
#include "cnf/noise.hpp"
#include "cnf/pruning.hpp"
#include "cnf/sgd.hpp"
#include "cnf/train.hpp"

namespace cnf {

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_error = 0;   // against the labels training sees
  double test_error = 0;  // against clean labels
  std::optional<double> test_error_given;  // against possibly noisy labels, when noise is on
  double learning_rate = 0;
  std::size_t alive_links = 0;
  std::size_t live_params = 0;
  std::size_t reported_params = 0;
  double wall_seconds = 0;
};

inline json to_json(const EpochRecord& r) {
  json j = {{"epoch", r.epoch},
            {"train_loss", r.train_loss},
            {"val_error", r.val_error},
            {"test_error", r.test_error},
            {"lr", r.learning_rate},
            {"alive_links", r.alive_links},
            {"live_params", r.live_params},
            {"reported_params", r.reported_params}};
  if (r.test_error_given) j["test_error_given"] = *r.test_error_given;
  return j;
}

inline json to_json(const PruneReport& r) {
  return {{"epoch", r.event.epoch},
          {"link_quota", r.event.links_to_remove},
          {"weight_quota", r.event.weights_to_remove},
          {"killed_links", r.killed_links},
          {"cascade_links", r.cascade_links},
          {"masked_weights", r.masked_weights},
          {"alive_links", r.alive_links},
          {"live_params", r.live_params},
          {"reported_params", r.reported_params},
          {"links_short", r.links_short},
          {"weights_short", r.weights_short}};
}

inline json to_json(const FittingReport& f) {
  json j = {{"clean_count", f.clean_count},
            {"noisy_count", f.noisy_count},
            {"clean_hits", f.clean_hits},
            {"noisy_hits", f.noisy_hits}};
  j["clean_fitting"] = f.clean_fitting ? json(*f.clean_fitting) : json(nullptr);
  j["noisy_fitting"] = f.noisy_fitting ? json(*f.noisy_fitting) : json(nullptr);
  return j;
}

inline json to_json(const PrunePlan& p) {
  json events = json::array();
  for (const auto& e : p.events)
    events.push_back({{"epoch", e.epoch}, {"links", e.links_to_remove}, {"weights", e.weights_to_remove}});
  const auto& b = p.budget;
  return {{"strategy", strategy_name(p.strategy)},
          {"sparsity", p.sparsity},
          {"total_links", b.total_links},
          {"min_links_kept", b.min_links_kept},
          {"links_kept", b.links_kept},
          {"conv_weights", b.total_conv_weights},
          {"weights_kept", b.weights_kept},
          {"events", events},
          {"warnings", p.warnings}};
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

template <typename T>
struct PreparedData {
  ImageDataset<T> all;
  SplitIndices split;  // train, validation, test
  LabeledSet labels;   // over `all`
  ImageDataset<T> train, val, test;
  LabeledSet train_labels, val_labels, test_labels;
  std::optional<double> annotator_error;  // held-out error at the chosen checkpoint
  std::optional<double> annotator_epoch;
  bool annotator_in_band = true;
};

template <typename T>
ImageDataset<T> load_dataset(const DataConfig& d) {
  if (d.source == "synthetic") return make_synthetic<T>(d.synthetic);
  return load_binary_records<T>(d.path, d.layout);
}

/// Loads, splits (stratified on clean labels) and injects label noise over
/// the whole dataset.
template <typename T>
PreparedData<T> prepare_data(const ExperimentConfig& cfg) {
  PreparedData<T> p;
  p.all = load_dataset<T>(cfg.data);
  p.all.validate();
  const int K = p.all.num_classes();
  p.split = stratified_split_indices(p.all.labels, K, cfg.data.split, cfg.data.split_seed);
  p.labels = LabeledSet::from_clean(p.all.labels, K);

  const auto& n = cfg.noise;
  if (n.type == "uniform") {
    p.labels = apply_uniform_noise(p.labels, n.rate, n.seed);
  } else if (n.type == "class") {
    const auto t = n.matrix == "pair" ? TransitionMatrix::pair_flip(K, n.rate) : TransitionMatrix::symmetric(K, n.rate);
    p.labels = apply_class_noise(p.labels, t, n.seed);
  } else if (n.type == "annotator") {
    AnnotatorConfig ac = n.annotator;
    ac.preprocess = cfg.data.augment;
    if (n.policy == "cross_fit") {
      auto cf = cross_fit_relabel(p.labels, p.all, n.rate, ac, n.folds, n.seed);
      double err = 0, ep = 0;
      for (std::size_t f = 0; f < cf.fold_errors.size(); ++f) {
        err += cf.fold_errors[f] / static_cast<double>(cf.fold_errors.size());
        ep += cf.fold_epochs[f] / static_cast<double>(cf.fold_epochs.size());
      }
      p.annotator_error = err;
      p.annotator_epoch = ep;
      p.annotator_in_band = cf.in_band;
      p.labels = std::move(cf.labels);
    } else {
      const auto tr = p.all.subset(p.split.parts[0]);
      const auto va = p.all.subset(p.split.parts[1]);
      auto annotator =
          train_annotator(tr, std::span<const int>(tr.labels), va, std::span<const int>(va.labels), n.rate, ac);
      p.annotator_error = annotator.heldout_error;
      p.annotator_epoch = annotator.epoch;
      p.annotator_in_band = annotator.in_band;
      p.labels = relabel_with_annotator(p.labels, p.all, annotator);
    }
  }

  auto part = [&](std::size_t k, ImageDataset<T>& ds, LabeledSet& ls) {
    ds = p.all.subset(p.split.parts[k]);
    ls = p.labels.subset(p.split.parts[k]);
  };
  part(0, p.train, p.train_labels);
  part(1, p.val, p.val_labels);
  part(2, p.test, p.test_labels);
  return p;
}

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

struct RunHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(const PruneReport&)> on_prune;
  std::function<void(const std::string&)> on_warning;
};

struct RunResult {
  std::string config_hash;
  FabricDims dims;
  std::optional<PrunePlan> plan;
  std::vector<EpochRecord> records;
  std::vector<PruneReport> reports;
  std::optional<FittingReport> fitting;
  std::optional<double> annotator_error;
  double noise_rate = 0;
  double final_test_error = 0;
  std::vector<std::string> warnings;
};

namespace detail {

class JsonLines {
 public:
  explicit JsonLines(const std::filesystem::path& path) : os_(path, std::ios::trunc) {
    if (!os_) throw FormatError("cannot write " + path.string());
  }
  void write(const json& j) { os_ << j.dump() << '\n' << std::flush; }

 private:
  std::ofstream os_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  os << text;
}

}  // namespace detail

/// Seeded train / prune / evaluate loop. Milestones and prune epochs are
/// first rescaled from reference_epochs to epochs. Writes into cfg.out:
///   config.json, config.hash, split_{train,val,test}.txt, metrics.jsonl,
///   prune_events.jsonl, timing.jsonl, fabric.dot, fabric.ckpt, summary.json,
///   and with noise on, noisy_labels.txt and fitting.json.
template <typename T = float>
RunResult run_experiment(const ExperimentConfig& requested, const RunHooks& hooks = {}) {
  requested.validate();
  const ExperimentConfig cfg = requested.epochs > 0 && requested.epochs != requested.reference_epochs
                                   ? scale_schedule(requested, requested.epochs)
                                   : requested;
  namespace fs = std::filesystem;
  const fs::path out = cfg.out;
  fs::create_directories(out);

  RunResult result;
  result.config_hash = config_hash(cfg);
  auto warn = [&](const std::string& w) {
    result.warnings.push_back(w);
    if (hooks.on_warning) hooks.on_warning(w);
  };
  detail::write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
  detail::write_text(out / "config.hash", result.config_hash + "\n");

  auto data = prepare_data<T>(cfg);
  write_index_list(out / "split_train.txt", data.split.parts[0]);
  write_index_list(out / "split_val.txt", data.split.parts[1]);
  write_index_list(out / "split_test.txt", data.split.parts[2]);
  const bool noisy = cfg.noise.type != "none";
  result.noise_rate = data.labels.noise_rate();
  result.annotator_error = data.annotator_error;
  if (noisy) write_label_sidecar(out / "noisy_labels.txt", data.labels);
  if (!data.annotator_in_band)
    warn("annotator never reached the target error band; closest checkpoint used (held-out error " +
         std::to_string(*data.annotator_error) + ")");

  const AugmentConfig& aug = cfg.data.augment;
  const int resolution = aug.crop ? aug.crop : (aug.resize ? aug.resize : static_cast<int>(data.all.resolution()));
  result.dims = FabricDims::from_resolution(cfg.layers, cfg.channels, resolution, data.all.num_classes());
  Fabric<T> fabric = Fabric<T>::build(result.dims, detail::mix_seed(cfg.seed, 1));
  Sgd<T> opt(cfg.sgd);
  const TrainOptions topt{cfg.batch_size, cfg.data.augment_train, aug};

  const std::size_t baseline_reported = param_count(result.dims).total;
  std::size_t final_reported = baseline_reported;
  std::size_t planned_total = 0, removed_so_far = 0;
  std::size_t next_event = 0;
  std::size_t carry_links = 0, carry_weights = 0;
  if (cfg.prune.enabled) {
    PlanOptions po;
    po.weight_base = cfg.prune.weight_base;
    if (!cfg.prune.epochs.empty()) po.epochs = cfg.prune.epochs;
    result.plan = build_plan(cfg.prune.strategy, cfg.prune.sparsity, fabric, po);
    for (const auto& w : result.plan->warnings) warn(w);
    for (const auto& e : result.plan->events)
      if (e.epoch < 1 || e.epoch > cfg.epochs)
        warn("prune event at epoch " + std::to_string(e.epoch) + " lies outside the run and never fires");
    final_reported = reported_param_count(result.dims, cfg.prune.sparsity);
    planned_total = result.plan->total_links_to_remove() + result.plan->total_weights_to_remove();
  }
  auto reported_now = [&]() -> std::size_t {
    if (planned_total == 0 || removed_so_far == 0) return baseline_reported;
    const double frac = std::min(1.0, static_cast<double>(removed_so_far) / static_cast<double>(planned_total));
    return baseline_reported -
           static_cast<std::size_t>(std::llround(frac * static_cast<double>(baseline_reported - final_reported)));
  };

  detail::JsonLines metrics(out / "metrics.jsonl");
  detail::JsonLines events(out / "prune_events.jsonl");
  detail::JsonLines timing(out / "timing.jsonl");

  const auto& train_given = data.train_labels.given;
  const auto& val_given = data.val_labels.given;
  const auto start = std::chrono::steady_clock::now();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = lr_at(epoch, cfg.sgd.learning_rate, cfg.lr_milestones);
    opt.set_learning_rate(rec.learning_rate);
    rec.train_loss = train_epoch(fabric, opt, data.train, std::span<const int>(train_given), topt,
                                 detail::mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));

    while (result.plan && next_event < result.plan->events.size() &&
           result.plan->events[next_event].epoch == epoch) {
      // Quota an earlier event could not fill rolls over to this one.
      PruneEvent ev = result.plan->events[next_event++];
      ev.links_to_remove += carry_links;
      ev.weights_to_remove += carry_weights;
      std::optional<SensitivityScores<T>> scores;
      if (cfg.prune.criterion == Criterion::Sensitivity) {
        const auto& src = cfg.prune.gradient_source;
        const ImageDataset<T>& ds = src == "train" ? data.train : src == "test" ? data.test : data.val;
        const LabeledSet& ls = src == "train" ? data.train_labels : src == "test" ? data.test_labels : data.val_labels;
        auto batches = eval_batches(ds, std::span<const int>(ls.given), aug, cfg.batch_size);
        if (cfg.prune.gradient_batches > 0 && batches.size() > static_cast<std::size_t>(cfg.prune.gradient_batches))
          batches.resize(static_cast<std::size_t>(cfg.prune.gradient_batches));
        scores = sensitivity_grads(fabric, std::span<const LabeledBatch<T>>(batches));
      }
      PruneReport rep = apply_event(fabric, ev, cfg.prune.criterion, scores ? &*scores : nullptr,
                                    ApplyOptions{cfg.prune.cascade_counts});
      const std::size_t links_done = rep.killed_links.size() + rep.cascade_links.size();
      carry_links = ev.links_to_remove - std::min(ev.links_to_remove, links_done);
      carry_weights = ev.weights_to_remove - std::min(ev.weights_to_remove, rep.masked_weights);
      removed_so_far += links_done + rep.masked_weights;
      rep.reported_params = reported_now();
      if (rep.links_short)
        warn("epoch " + std::to_string(epoch) + ": link quota not reached (" +
             std::to_string(rep.killed_links.size() + rep.cascade_links.size()) + " of " +
             std::to_string(ev.links_to_remove) + ")");
      if (rep.weights_short)
        warn("epoch " + std::to_string(epoch) + ": weight quota not reached (" + std::to_string(rep.masked_weights) +
             " of " + std::to_string(ev.weights_to_remove) + ")");
      events.write(to_json(rep));
      if (hooks.on_prune) hooks.on_prune(rep);
      result.reports.push_back(std::move(rep));
    }

    rec.val_error = error_rate(predict(fabric, data.val, aug), val_given);
    const auto test_pred = predict(fabric, data.test, aug);
    rec.test_error = error_rate(test_pred, data.test_labels.clean);
    if (noisy) rec.test_error_given = error_rate(test_pred, data.test_labels.given);
    rec.alive_links = fabric.alive_link_count();
    rec.live_params = live_param_count(fabric);
    rec.reported_params = reported_now();
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    metrics.write(to_json(rec));
    timing.write({{"epoch", epoch}, {"wall_seconds", rec.wall_seconds}});
    if (hooks.on_epoch) hooks.on_epoch(rec);
    result.records.push_back(rec);
  }

  const auto test_pred = predict(fabric, data.test, aug);
  result.final_test_error = error_rate(test_pred, data.test_labels.clean);
  if (noisy) {
    result.fitting = fitting_report(test_pred, data.test_labels);
    detail::write_text(out / "fitting.json", to_json(*result.fitting).dump(2) + "\n");
  }
  save_checkpoint(fabric, out / "fabric.ckpt");
  detail::write_text(out / "fabric.dot", export_dot(fabric, DotOptions{true}));

  json summary = {{"config_hash", result.config_hash},
                  {"epochs", cfg.epochs},
                  {"final_test_error", result.final_test_error},
                  {"alive_links", fabric.alive_link_count()},
                  {"live_params", live_param_count(fabric)},
                  {"reported_params", reported_now()},
                  {"noise_rate", result.noise_rate},
                  {"prune_events", result.reports.size()},
                  {"warnings", result.warnings}};
  if (result.plan) summary["plan"] = to_json(*result.plan);
  if (result.annotator_error) summary["annotator_error"] = *result.annotator_error;
  detail::write_text(out / "summary.json", summary.dump(2) + "\n");
  return result;
}

}  // namespace cnf
