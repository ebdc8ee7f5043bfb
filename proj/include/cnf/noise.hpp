#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cnf/data.hpp"
#include "cnf/errors.hpp"
#include "cnf/fabric.hpp"
#include "cnf/sgd.hpp"
#include "cnf/train.hpp"

namespace cnf {

/// Clean labels y alongside given (possibly corrupted) labels ỹ. Images
/// live in the ImageDataset the labels index into.
struct LabeledSet {
  std::vector<int> clean;
  std::vector<int> given;
  int num_classes = 0;

  static LabeledSet from_clean(std::vector<int> labels, int num_classes) {
    LabeledSet s;
    s.given = labels;
    s.clean = std::move(labels);
    s.num_classes = num_classes;
    s.validate();
    return s;
  }

  std::size_t size() const { return clean.size(); }

  std::size_t mislabeled() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < clean.size(); ++i) n += clean[i] != given[i];
    return n;
  }

  double noise_rate() const {
    return clean.empty() ? 0.0 : static_cast<double>(mislabeled()) / static_cast<double>(clean.size());
  }

  LabeledSet subset(std::span<const std::size_t> idx) const {
    LabeledSet s;
    s.num_classes = num_classes;
    for (std::size_t i : idx) {
      s.clean.push_back(clean.at(i));
      s.given.push_back(given.at(i));
    }
    return s;
  }

  void validate() const {
    if (clean.size() != given.size()) throw StructuralError("labeled set: clean/given length mismatch");
    for (std::size_t i = 0; i < clean.size(); ++i)
      if (clean[i] < 0 || clean[i] >= num_classes || given[i] < 0 || given[i] >= num_classes)
        throw InputError("labeled set: label out of range at item " + std::to_string(i));
  }
};

/// Row-stochastic K x K matrix; cell (i,j) is the probability that an item
/// of class i is labelled j.
class TransitionMatrix {
 public:
  explicit TransitionMatrix(std::vector<std::vector<double>> rows) : rows_(std::move(rows)) { validate(); }

  static TransitionMatrix identity(int k) {
    std::vector<std::vector<double>> r(static_cast<std::size_t>(k), std::vector<double>(static_cast<std::size_t>(k), 0.0));
    for (std::size_t i = 0; i < r.size(); ++i) r[i][i] = 1.0;
    return TransitionMatrix(std::move(r));
  }

  /// Symmetric flipping: 1-p on the diagonal, p/(K-1) elsewhere.
  static TransitionMatrix symmetric(int k, double p) {
    if (k < 2) throw InputError("symmetric flipping needs at least 2 classes");
    const auto K = static_cast<std::size_t>(k);
    std::vector<std::vector<double>> r(K, std::vector<double>(K, p / (k - 1)));
    for (std::size_t i = 0; i < K; ++i) r[i][i] = 1.0 - p;
    return TransitionMatrix(std::move(r));
  }

  /// Pair flipping: class i goes to (i+1) mod K with probability p.
  static TransitionMatrix pair_flip(int k, double p) {
    const auto K = static_cast<std::size_t>(k);
    std::vector<std::vector<double>> r(K, std::vector<double>(K, 0.0));
    for (std::size_t i = 0; i < K; ++i) {
      r[i][i] = 1.0 - p;
      r[i][(i + 1) % K] += p;
    }
    return TransitionMatrix(std::move(r));
  }

  int size() const { return static_cast<int>(rows_.size()); }
  const std::vector<double>& row(int i) const { return rows_.at(static_cast<std::size_t>(i)); }

 private:
  void validate() const {
    if (rows_.empty()) throw InputError("transition matrix is empty");
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      if (rows_[i].size() != rows_.size()) throw InputError("transition matrix is not square");
      double s = 0;
      for (double v : rows_[i]) {
        if (!(v >= 0)) throw InputError("transition matrix has a negative entry in row " + std::to_string(i));
        s += v;
      }
      if (std::abs(s - 1.0) > 1e-9)
        throw InputError("transition matrix row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }

  std::vector<std::vector<double>> rows_;
};

/// Type 1: each item flips with probability p to a uniformly chosen other class.
inline LabeledSet apply_uniform_noise(const LabeledSet& set, double p, std::uint64_t seed) {
  if (p < 0 || p > 1) throw InputError("uniform noise rate must lie in [0,1]");
  if (set.num_classes < 2 && p > 0) throw InputError("uniform noise needs at least 2 classes");
  LabeledSet out = set;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> other(0, std::max(0, set.num_classes - 2));
  for (std::size_t i = 0; i < set.size(); ++i) {
    out.given[i] = set.clean[i];
    if (u(rng) < p) {
      const int r = other(rng);
      out.given[i] = r >= set.clean[i] ? r + 1 : r;
    }
  }
  return out;
}

/// Type 2: each item's given label is drawn from row T[clean label].
inline LabeledSet apply_class_noise(const LabeledSet& set, const TransitionMatrix& t, std::uint64_t seed) {
  if (t.size() != set.num_classes)
    throw InputError("transition matrix has " + std::to_string(t.size()) + " classes, set has " +
                     std::to_string(set.num_classes));
  LabeledSet out = set;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& row = t.row(set.clean[i]);
    const double r = u(rng);
    double acc = 0;
    int pick = static_cast<int>(row.size()) - 1;
    for (std::size_t j = 0; j < row.size(); ++j) {
      acc += row[j];
      if (r < acc) {
        pick = static_cast<int>(j);
        break;
      }
    }
    // Guard against r landing in the rounding slack past a zero-probability tail.
    while (row[static_cast<std::size_t>(pick)] == 0.0 && pick > 0) --pick;
    out.given[i] = pick;
  }
  return out;
}

struct AnnotatorConfig {
  int layers = 3;
  int channels = 4;
  SgdConfig sgd{0.05, 0.9, 0.0};
  int batch_size = 32;
  int max_epochs = 60;
  double band = 0.01;
  // Held-out evaluations per epoch; >1 gives finer checkpoints near epsilon.
  int evals_per_epoch = 4;
  bool augment = false;
  AugmentConfig preprocess;
  std::uint64_t seed = 17;
};

template <typename T>
struct Annotator {
  Fabric<T> model;
  AugmentConfig preprocess;
  double epoch = 0;  // fractional when evaluated within an epoch
  double heldout_error = 1.0;
  bool in_band = false;
  std::vector<std::pair<double, double>> error_curve;  // (epoch, held-out error)
};

/// Trains a small fabric, evaluating held-out error as it goes, and stops at
/// the first evaluation within [eps - band, eps + band]. If the band is never
/// hit, returns the evaluated checkpoint closest to eps, flagged out of band.
template <typename T>
Annotator<T> train_annotator(const ImageDataset<T>& train, std::span<const int> train_labels,
                             const ImageDataset<T>& heldout, std::span<const int> heldout_labels, double epsilon,
                             const AnnotatorConfig& cfg) {
  const int K = train.num_classes();
  if (!(epsilon > 0 && epsilon < 1.0 - 1.0 / K))
    throw InputError("annotator epsilon must lie in (0, 1-1/K)");
  if (heldout.size() == 0) throw InputError("annotator needs a held-out split");
  const auto dims = FabricDims::from_resolution(cfg.layers, cfg.channels, static_cast<int>(train.resolution()), K);
  Fabric<T> model = Fabric<T>::build(dims, cfg.seed);
  Sgd<T> opt(cfg.sgd);

  Annotator<T> best;
  best.preprocess = cfg.preprocess;
  double best_gap = 2.0;
  auto evaluate = [&](double epoch) {
    const auto pred = predict(model, heldout, cfg.preprocess);
    const double err = error_rate(pred, heldout_labels);
    best.error_curve.emplace_back(epoch, err);
    const double gap = std::abs(err - epsilon);
    if (gap < best_gap) {
      best_gap = gap;
      best.model = model;
      best.epoch = epoch;
      best.heldout_error = err;
    }
    return gap <= cfg.band + 1e-12;
  };

  if (evaluate(0)) {
    best.in_band = true;
    return best;
  }
  const int evals = std::max(1, cfg.evals_per_epoch);
  for (int e = 1; e <= cfg.max_epochs; ++e) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(e)));
    std::shuffle(order.begin(), order.end(), rng);
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    const std::size_t nb = (order.size() + bs - 1) / bs;
    std::size_t next_eval = 1;
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t start = b * bs, end = std::min(order.size(), start + bs);
      if (end - start >= 2) {
        std::span<const std::size_t> idx(order.data() + start, end - start);
        auto batch = make_batch(train, train_labels, idx, cfg.preprocess, cfg.augment,
                                detail::mix_seed(cfg.seed, e * 100003ull + b));
        model.zero_grad();
        Tape<T> tape;
        Var logits = forward(tape, model, batch.images, Mode::Train);
        Var loss = softmax_cross_entropy(tape, logits, std::span<const int>(batch.labels));
        tape.backward(loss);
        opt.step(model.parameters());
      }
      if ((b + 1) * static_cast<std::size_t>(evals) >= next_eval * nb) {
        ++next_eval;
        if (evaluate(e - 1 + static_cast<double>(b + 1) / static_cast<double>(nb))) {
          best.in_band = true;
          return best;
        }
      }
    }
  }
  return best;
}

/// Type 3: given labels become the annotator's predictions.
template <typename T>
LabeledSet relabel_with_annotator(const LabeledSet& set, const ImageDataset<T>& images, Annotator<T>& annotator) {
  if (images.size() != set.size()) throw StructuralError("relabel: images and labels differ in length");
  LabeledSet out = set;
  out.given = predict(annotator.model, images, annotator.preprocess);
  return out;
}

struct CrossFitResult {
  LabeledSet labels;
  std::vector<double> fold_errors;  // each annotator's error on the fold it relabelled
  std::vector<double> fold_epochs;
  bool in_band = true;
};

/// Type 3 without memorisation: the items are split into stratified folds and
/// each fold is relabelled by an annotator trained on the remaining folds and
/// stopped on that fold, so every given label comes from a model that never
/// trained on the item.
template <typename T>
CrossFitResult cross_fit_relabel(const LabeledSet& set, const ImageDataset<T>& images, double epsilon,
                                 const AnnotatorConfig& cfg, int folds = 2, std::uint64_t seed = 0) {
  if (images.size() != set.size()) throw StructuralError("cross-fit: images and labels differ in length");
  if (folds < 2) throw InputError("cross-fit needs at least 2 folds");
  const std::vector<double> fractions(static_cast<std::size_t>(folds), 1.0 / folds);
  const auto parts = stratified_split_indices(set.clean, set.num_classes, fractions, seed);
  CrossFitResult out;
  out.labels = set;
  for (std::size_t f = 0; f < parts.parts.size(); ++f) {
    std::vector<std::size_t> rest;
    for (std::size_t g = 0; g < parts.parts.size(); ++g)
      if (g != f) rest.insert(rest.end(), parts.parts[g].begin(), parts.parts[g].end());
    std::sort(rest.begin(), rest.end());
    const auto& own = parts.parts[f];
    const auto train = images.subset(rest);
    const auto target = images.subset(own);
    const auto train_labels = set.subset(rest).clean;
    const auto target_labels = set.subset(own).clean;
    AnnotatorConfig fold_cfg = cfg;
    fold_cfg.seed = detail::mix_seed(cfg.seed, f);
    auto a = train_annotator(train, std::span<const int>(train_labels), target, std::span<const int>(target_labels),
                             epsilon, fold_cfg);
    const auto pred = predict(a.model, target, a.preprocess);
    for (std::size_t k = 0; k < own.size(); ++k) out.labels.given[own[k]] = pred[k];
    out.fold_errors.push_back(a.heldout_error);
    out.fold_epochs.push_back(a.epoch);
    out.in_band = out.in_band && a.in_band;
  }
  return out;
}

struct FittingReport {
  std::optional<double> clean_fitting;  // undefined when no clean items
  std::optional<double> noisy_fitting;  // undefined when no noisy items
  std::size_t clean_count = 0;
  std::size_t noisy_count = 0;
  std::size_t clean_hits = 0;
  std::size_t noisy_hits = 0;
};

/// clean fitting = |{ŷ = y = ỹ}| / |{y = ỹ}|, noisy fitting = |{ŷ = ỹ, y ≠ ỹ}| / |{y ≠ ỹ}|.
inline FittingReport fitting_report(std::span<const int> predicted, const LabeledSet& set) {
  if (predicted.size() != set.size()) throw StructuralError("fitting report: predictions misaligned");
  FittingReport r;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.clean[i] == set.given[i]) {
      ++r.clean_count;
      r.clean_hits += predicted[i] == set.clean[i];
    } else {
      ++r.noisy_count;
      r.noisy_hits += predicted[i] == set.given[i];
    }
  }
  if (r.clean_count) r.clean_fitting = static_cast<double>(r.clean_hits) / static_cast<double>(r.clean_count);
  if (r.noisy_count) r.noisy_fitting = static_cast<double>(r.noisy_hits) / static_cast<double>(r.noisy_count);
  return r;
}

/// Sidecar: "# index clean given" header, then one "i y ỹ" line per item in order.
inline void write_label_sidecar(const std::filesystem::path& path, const LabeledSet& set) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  os << "# index clean given classes=" << set.num_classes << '\n';
  for (std::size_t i = 0; i < set.size(); ++i) os << i << ' ' << set.clean[i] << ' ' << set.given[i] << '\n';
}

inline LabeledSet read_label_sidecar(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot read " + path.string());
  LabeledSet s;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto pos = line.find("classes=");
      if (pos != std::string::npos) s.num_classes = std::stoi(line.substr(pos + 8));
      continue;
    }
    std::istringstream ls(line);
    std::size_t idx;
    int y, g;
    if (!(ls >> idx >> y >> g) || idx != s.clean.size())
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed sidecar record");
    s.clean.push_back(y);
    s.given.push_back(g);
  }
  if (s.num_classes == 0)
    for (std::size_t i = 0; i < s.size(); ++i) s.num_classes = std::max({s.num_classes, s.clean[i] + 1, s.given[i] + 1});
  s.validate();
  return s;
}

}  // namespace cnf
