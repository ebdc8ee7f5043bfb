#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cnf/autodiff.hpp"
#include "cnf/errors.hpp"
#include "cnf/fabric.hpp"
#include "cnf/tensor.hpp"

namespace cnf {

enum class Criterion { Magnitude, Sensitivity };
enum class Strategy { Early, Late, Iterative };

inline const char* to_string(Criterion c) {
  return c == Criterion::Magnitude ? "magnitude" : "sensitivity";
}

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::Early: return "early";
    case Strategy::Late: return "late";
    case Strategy::Iterative: return "iterative";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Sparsity arithmetic. Sparsities are handled in parts per million so that
// products such as 0.05 * 5373120 stay exact.
// ---------------------------------------------------------------------------

inline std::uint64_t sparsity_ppm(double sparsity) {
  if (!(sparsity > 0.0 && sparsity < 1.0))
    throw InputError("sparsity must lie in (0,1), got " + std::to_string(sparsity));
  return static_cast<std::uint64_t>(std::llround(sparsity * 1e6));
}

inline std::size_t floor_fraction(double sparsity, std::size_t n) {
  return static_cast<std::size_t>(sparsity_ppm(sparsity) * n / 1'000'000u);
}

inline std::size_t ceil_fraction(double sparsity, std::size_t n) {
  return static_cast<std::size_t>((sparsity_ppm(sparsity) * n + 999'999u) / 1'000'000u);
}

/// Parameter count in the accounting used for published pruned models:
/// floor(s * prunable) + fixed, where prunable covers every link parameter
/// of the full fabric (conv, bias, BN) and fixed covers stem and head.
inline std::size_t reported_param_count(const FabricDims& dims, double sparsity) {
  const ParamBreakdown b = param_count(dims);
  return floor_fraction(sparsity, b.link_params) + b.stem_params + b.head_params;
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

/// |w| for magnitude, |w * dL/dw| for sensitivity.
inline double score_weight(Criterion c, double w, std::optional<double> grad = std::nullopt) {
  if (c == Criterion::Magnitude) return std::abs(w);
  if (!grad) throw UsageError("sensitivity score needs a gradient");
  return std::abs(w * *grad);
}

/// Euclidean norm of a vector of per-weight scores.
template <typename T>
double score_norm(std::span<const T> per_weight) {
  double s = 0;
  for (T v : per_weight) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

/// Link score: Euclidean norm of the per-weight criterion over the link's
/// conv weight matrix (bias and BN excluded). For sensitivity, `grads` holds
/// dL/dw aligned with the conv weights.
template <typename T>
double score_link(Criterion c, const Link<T>& link, std::span<const T> grads = {}) {
  if (!link.alive) throw UsageError("cannot score dead link " + std::to_string(link.id));
  const auto& w = link.block.weight.value;
  if (c == Criterion::Sensitivity && grads.size() != w.size())
    throw UsageError("sensitivity link score needs gradients aligned with the conv weights");
  double s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double v = c == Criterion::Magnitude ? score_weight(c, w[i])
                                               : score_weight(c, w[i], static_cast<double>(grads[i]));
    s += v * v;
  }
  return std::sqrt(s);
}

/// Per-weight |w * dL/dw| over every link's conv weights, averaged over batches.
template <typename T>
struct SensitivityScores {
  std::vector<Tensor<T>> per_link;  // indexed by link id; empty tensor for dead links
  std::size_t batches = 0;
};

template <typename T>
struct LabeledBatch {
  Tensor<T> images;         // [B,3,R,R]
  std::vector<int> labels;  // B entries
};

/// One pass over `source` accumulating batch-averaged |w * dL/dw|. Parameters,
/// BN running statistics and gradients are left as they were found.
template <typename T>
SensitivityScores<T> sensitivity_grads(Fabric<T>& fabric, std::span<const LabeledBatch<T>> source) {
  if (source.empty()) throw UsageError("sensitivity scoring needs a non-empty gradient source");
  SensitivityScores<T> out;
  out.per_link.resize(fabric.links().size());
  for (const auto& l : fabric.links())
    if (l.alive) out.per_link[l.id] = Tensor<T>::zeros_like(l.block.weight.value);

  // Snapshot state the forward pass mutates.
  std::vector<BnStats<T>> stats;
  stats.push_back(fabric.stem().stats);
  for (const auto& l : fabric.links()) stats.push_back(l.block.stats);
  std::vector<Tensor<T>> saved_grads;
  for (auto* p : fabric.parameters()) saved_grads.push_back(p->grad);

  for (const auto& batch : source) {
    fabric.zero_grad();
    Tape<T> tape;
    Var logits = forward(tape, fabric, batch.images, Mode::Train);
    Var loss = softmax_cross_entropy(tape, logits, std::span<const int>(batch.labels));
    tape.backward(loss);
    for (const auto& l : fabric.links()) {
      if (!l.alive) continue;
      const auto& w = l.block.weight.value;
      const auto& g = l.block.weight.grad;
      auto& acc = out.per_link[l.id];
      for (std::size_t i = 0; i < w.size(); ++i) acc[i] += std::abs(w[i] * g[i]);
    }
    ++out.batches;
  }
  for (auto& t : out.per_link)
    for (auto& v : t.storage()) v /= static_cast<T>(out.batches);

  fabric.stem().stats = stats[0];
  for (std::size_t i = 0; i < fabric.links().size(); ++i) fabric.links()[i].block.stats = stats[i + 1];
  fabric.zero_grad();
  auto params = fabric.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->grad = saved_grads[i];
  return out;
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

/// Why a ranked candidate was passed over.
enum class SkipReason { Disconnects, Overshoots, AlreadyRemoved, EmptiesFilter, Rejected };

inline const char* to_string(SkipReason r) {
  switch (r) {
    case SkipReason::Disconnects: return "disconnects";
    case SkipReason::Overshoots: return "overshoots";
    case SkipReason::AlreadyRemoved: return "already_removed";
    case SkipReason::EmptiesFilter: return "empties_filter";
    case SkipReason::Rejected: return "rejected";
  }
  return "?";
}

template <typename E>
struct Selection {
  std::vector<E> selected;
  std::vector<std::pair<E, SkipReason>> skipped;
  std::size_t removed = 0;  // selected plus anything their acceptance removed
  bool filled = false;
};

/// A pruning condition over a growing selection P. `check(e)` returns
/// nullopt when P ∪ {e} is admissible, else the reason; `accept(e)` commits e
/// and returns how many elements it removes (1, or more with cascades).
template <typename C, typename E>
concept PruneCondition = requires(C c, const E& e) {
  { c.check(e) } -> std::convertible_to<std::optional<SkipReason>>;
  { c.accept(e) } -> std::convertible_to<std::size_t>;
};

/// Walks `ranked` (ascending score), adding each element whose addition keeps
/// the condition satisfied, until `n` elements are removed or the list runs out.
template <typename E, PruneCondition<E> Cond>
Selection<E> select_prunable(std::span<const E> ranked, std::size_t n, Cond& condition) {
  Selection<E> sel;
  for (const E& e : ranked) {
    if (sel.removed >= n) break;
    if (auto why = condition.check(e)) {
      sel.skipped.emplace_back(e, *why);
      continue;
    }
    sel.removed += condition.accept(e);
    sel.selected.push_back(e);
  }
  sel.filled = sel.removed >= n;
  return sel;
}

/// Adapts a predicate over whole proposed sets, pred(P ∪ {e}) -> bool.
template <typename E, typename Pred>
class SetPredicate {
 public:
  explicit SetPredicate(Pred pred) : pred_(std::move(pred)) {}
  std::optional<SkipReason> check(const E& e) {
    proposed_ = chosen_;
    proposed_.push_back(e);
    if (pred_(std::span<const E>(proposed_))) return std::nullopt;
    return SkipReason::Rejected;
  }
  std::size_t accept(const E& e) {
    chosen_.push_back(e);
    return 1;
  }

 private:
  Pred pred_;
  std::vector<E> chosen_;
  std::vector<E> proposed_;
};

template <typename E, typename Pred>
  requires(!PruneCondition<Pred, E>)
Selection<E> select_prunable(std::span<const E> ranked, std::size_t n, Pred pred) {
  SetPredicate<E, Pred> cond(std::move(pred));
  return select_prunable<E>(ranked, n, cond);
}

/// True iff removing every link in `proposed` still leaves an alive
/// directed path from the input node to the output node.
template <typename T>
bool link_condition(const Fabric<T>& f, std::span<const std::size_t> proposed) {
  std::vector<bool> excluded(f.links().size(), false);
  for (std::size_t id : proposed) excluded.at(id) = true;
  return input_reaches_output(f, excluded);
}

namespace detail {

// Fixpoint removal over an alive-flag vector. Returns links killed.
template <typename T>
std::vector<std::size_t> cascade_on(const Fabric<T>& f, std::vector<bool>& alive) {
  std::vector<std::size_t> killed;
  const NodeId in = f.input_node(), out = f.output_node();
  auto count_alive = [&](const std::vector<std::size_t>& ids) {
    return std::count_if(ids.begin(), ids.end(), [&](std::size_t id) { return alive[id]; });
  };
  std::deque<NodeId> work;
  for (std::size_t i = 0; i < f.node_count(); ++i) work.push_back(f.node_at(i));
  std::vector<bool> queued(f.node_count(), true);
  auto enqueue = [&](NodeId n) {
    const std::size_t i = f.node_index(n);
    if (!queued[i]) {
      queued[i] = true;
      work.push_back(n);
    }
  };
  while (!work.empty()) {
    const NodeId n = work.front();
    work.pop_front();
    queued[f.node_index(n)] = false;
    const auto& ins = f.in_links(n);
    const auto& outs = f.out_links(n);
    const bool no_out = n != out && count_alive(outs) == 0;
    const bool no_in = n != in && count_alive(ins) == 0;
    if (no_out)
      for (std::size_t id : ins)
        if (alive[id]) {
          alive[id] = false;
          killed.push_back(id);
          enqueue(f.link(id).from);
        }
    if (no_in)
      for (std::size_t id : outs)
        if (alive[id]) {
          alive[id] = false;
          killed.push_back(id);
          enqueue(f.link(id).to);
        }
  }
  return killed;
}

template <typename T>
std::vector<bool> alive_flags(const Fabric<T>& f) {
  std::vector<bool> a(f.links().size());
  for (const auto& l : f.links()) a[l.id] = l.alive;
  return a;
}

}  // namespace detail

/// Kills links made useless by earlier removals: a non-output node without
/// alive out-links loses its in-links, a non-input node without alive
/// in-links loses its out-links, repeated to a fixpoint. Returns the links
/// killed, in kill order.
template <typename T>
std::vector<std::size_t> cascade_remove(Fabric<T>& f) {
  auto alive = detail::alive_flags(f);
  auto killed = detail::cascade_on(f, alive);
  for (std::size_t id : killed) f.link(id).alive = false;
  return killed;
}

/// Link-stage condition: P stays admissible while input reaches output
/// after removing P and its cascade, and the total removal stays within quota.
template <typename T>
class CascadingLinkCondition {
 public:
  // With cascade_counts off, only ranked kills use up the quota.
  CascadingLinkCondition(const Fabric<T>& f, std::size_t quota, bool cascade_counts = true)
      : f_(f), alive_(detail::alive_flags(f)), quota_(quota), cascade_counts_(cascade_counts) {}

  std::optional<SkipReason> check(std::size_t id) {
    if (!alive_.at(id)) return SkipReason::AlreadyRemoved;
    std::vector<bool> trial = alive_;
    trial[id] = false;
    if (!reaches(trial)) return SkipReason::Disconnects;
    auto extra = detail::cascade_on(f_, trial);
    if (removed_ + 1 + (cascade_counts_ ? extra.size() : 0) > quota_) return SkipReason::Overshoots;
    pending_ = {id, std::move(trial), std::move(extra)};
    return std::nullopt;
  }

  std::size_t accept(std::size_t id) {
    if (!pending_ || pending_->id != id) {
      if (check(id)) throw UsageError("accepting an inadmissible link");
    }
    alive_ = std::move(pending_->alive);
    const std::size_t n = 1 + (cascade_counts_ ? pending_->cascade.size() : 0);
    cascade_.insert(cascade_.end(), pending_->cascade.begin(), pending_->cascade.end());
    removed_ += n;
    pending_.reset();
    return n;
  }

  const std::vector<std::size_t>& cascade() const { return cascade_; }
  const std::vector<bool>& alive() const { return alive_; }

 private:
  struct Pending {
    std::size_t id;
    std::vector<bool> alive;
    std::vector<std::size_t> cascade;
  };

  bool reaches(const std::vector<bool>& alive) const {
    std::vector<bool> excluded(alive.size());
    for (std::size_t i = 0; i < alive.size(); ++i) excluded[i] = !alive[i];
    return input_reaches_output(f_, excluded);
  }

  const Fabric<T>& f_;
  std::vector<bool> alive_;
  std::size_t quota_;
  bool cascade_counts_;
  std::size_t removed_ = 0;
  std::vector<std::size_t> cascade_;
  std::optional<Pending> pending_;
};

/// True iff masking `position` (currently unmasked) leaves at least one
/// unmasked weight in the matrix.
template <typename T>
bool weight_condition(const Tensor<T>& mask, std::size_t position) {
  if (mask[position] == T{0}) throw UsageError("weight already masked");
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (i != position && mask[i] != T{0}) return true;
  return false;
}

struct WeightRef {
  std::uint32_t link = 0;
  std::uint32_t index = 0;
  friend bool operator==(const WeightRef&, const WeightRef&) = default;
};

/// Weight-stage condition: no conv weight matrix may become all-masked.
class FilterKeepsOneCondition {
 public:
  explicit FilterKeepsOneCondition(std::vector<std::size_t> unmasked)
      : unmasked_(std::move(unmasked)) {}
  std::optional<SkipReason> check(const WeightRef& w) const {
    if (unmasked_.at(w.link) < 2) return SkipReason::EmptiesFilter;
    return std::nullopt;
  }
  std::size_t accept(const WeightRef& w) {
    --unmasked_.at(w.link);
    return 1;
  }

 private:
  std::vector<std::size_t> unmasked_;
};

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

struct PruneEvent {
  int epoch = 0;
  std::size_t links_to_remove = 0;
  std::size_t weights_to_remove = 0;
  friend bool operator==(const PruneEvent&, const PruneEvent&) = default;
};

struct SparsityBudget {
  double sparsity = 0;
  std::size_t total_links = 0;
  std::size_t min_links_kept = 0;  // longest linear path
  std::size_t links_kept = 0;
  std::size_t total_conv_weights = 0;  // over links surviving link pruning
  std::size_t weights_kept = 0;
};

struct PrunePlan {
  Strategy strategy = Strategy::Iterative;
  double sparsity = 0;
  SparsityBudget budget;
  std::vector<PruneEvent> events;
  std::vector<std::string> warnings;

  std::size_t total_links_to_remove() const {
    std::size_t n = 0;
    for (const auto& e : events) n += e.links_to_remove;
    return n;
  }
  std::size_t total_weights_to_remove() const {
    std::size_t n = 0;
    for (const auto& e : events) n += e.weights_to_remove;
    return n;
  }
};

/// What the weight-pruning fraction is measured against.
enum class WeightBase { PostLinkPruning, PreLinkPruning };

struct PlanOptions {
  WeightBase weight_base = WeightBase::PostLinkPruning;
  // Overrides the strategy's default event epochs (e.g. after rescaling).
  std::optional<std::vector<int>> epochs;
};

inline std::vector<int> default_prune_epochs(Strategy s) {
  switch (s) {
    case Strategy::Early: return {5};
    case Strategy::Late: return {75};
    case Strategy::Iterative: return {5, 15, 25, 35, 45, 55, 65, 75};
  }
  return {};
}

/// Splits `total` into `parts` integer quotas differing by at most one,
/// larger ones first.
inline std::vector<std::size_t> split_quota(std::size_t total, std::size_t parts) {
  std::vector<std::size_t> q(parts, parts ? total / parts : 0);
  for (std::size_t i = 0; parts && i < total % parts; ++i) ++q[i];
  return q;
}

template <typename T>
PrunePlan build_plan(Strategy strategy, double sparsity, const Fabric<T>& fabric,
                     const PlanOptions& options = {}) {
  sparsity_ppm(sparsity);  // validates range
  PrunePlan plan;
  plan.strategy = strategy;
  plan.sparsity = sparsity;
  auto& b = plan.budget;
  b.sparsity = sparsity;
  b.total_links = fabric.alive_link_count();
  b.min_links_kept = static_cast<std::size_t>(longest_linear_path(fabric));
  b.links_kept = std::min(b.total_links, std::max(ceil_fraction(sparsity, b.total_links), b.min_links_kept));
  const std::size_t per_link = fabric.links().empty() ? 0 : fabric.links().front().block.weight.value.size();
  b.total_conv_weights = b.links_kept * per_link;
  const std::size_t base = options.weight_base == WeightBase::PostLinkPruning
                               ? b.total_conv_weights
                               : b.total_links * per_link;
  b.weights_kept = std::min(b.total_conv_weights, std::max(ceil_fraction(sparsity, base), b.links_kept));
  const std::size_t link_target = b.total_links - b.links_kept;
  const std::size_t weight_target = b.total_conv_weights - b.weights_kept;

  const std::vector<int> epochs = options.epochs ? *options.epochs : default_prune_epochs(strategy);
  if (epochs.empty()) throw InputError("prune plan: no event epochs");
  const auto lq = split_quota(link_target, epochs.size());
  const auto wq = split_quota(weight_target, epochs.size());
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    if (!plan.events.empty() && plan.events.back().epoch == epochs[i]) {
      plan.events.back().links_to_remove += lq[i];
      plan.events.back().weights_to_remove += wq[i];
      plan.warnings.push_back("events collide at epoch " + std::to_string(epochs[i]) + "; quotas merged");
      continue;
    }
    if (!plan.events.empty() && plan.events.back().epoch > epochs[i])
      throw InputError("prune plan: event epochs must be non-decreasing");
    plan.events.push_back(PruneEvent{epochs[i], lq[i], wq[i]});
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Application
// ---------------------------------------------------------------------------

struct PruneReport {
  PruneEvent event;
  std::vector<std::size_t> killed_links;   // chosen by the ranking
  std::vector<std::size_t> cascade_links;  // removed as a consequence
  std::size_t masked_weights = 0;
  std::size_t live_params = 0;
  std::size_t reported_params = 0;  // filled by callers that know the plan
  std::size_t alive_links = 0;
  bool links_short = false;    // link quota not reached
  bool weights_short = false;  // weight quota not reached
  std::size_t link_skips = 0;
  std::size_t weight_skips = 0;

  bool incomplete() const { return links_short || weights_short; }
};

/// Prunes links then weights per one plan event. Stem and head never take part.
struct ApplyOptions {
  bool cascade_counts = true;  // cascade kills use up the link quota
};

template <typename T>
PruneReport apply_event(Fabric<T>& fabric, const PruneEvent& event, Criterion criterion,
                        const SensitivityScores<T>* scores = nullptr, const ApplyOptions& options = {}) {
  if (criterion == Criterion::Sensitivity && !scores)
    throw UsageError("sensitivity pruning needs sensitivity scores");
  PruneReport report;
  report.event = event;

  auto weight_score = [&](const Link<T>& l, std::size_t i) -> double {
    if (criterion == Criterion::Magnitude) return score_weight(criterion, l.block.weight.value[i]);
    const auto& s = scores->per_link.at(l.id);
    if (s.size() != l.block.weight.value.size())
      throw UsageError("sensitivity scores missing for link " + std::to_string(l.id));
    return static_cast<double>(s[i]);
  };

  if (event.links_to_remove > 0) {
    std::vector<std::pair<double, std::size_t>> ranked;
    for (const auto& l : fabric.links()) {
      if (!l.alive) continue;
      double s = 0;
      for (std::size_t i = 0; i < l.block.weight.value.size(); ++i) {
        const double v = weight_score(l, i);
        s += v * v;
      }
      ranked.emplace_back(std::sqrt(s), l.id);
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::size_t> order;
    for (const auto& r : ranked) order.push_back(r.second);
    CascadingLinkCondition<T> cond(fabric, event.links_to_remove, options.cascade_counts);
    auto sel = select_prunable<std::size_t>(std::span<const std::size_t>(order), event.links_to_remove, cond);
    for (std::size_t id : sel.selected) fabric.link(id).alive = false;
    for (std::size_t id : cond.cascade()) fabric.link(id).alive = false;
    report.killed_links = sel.selected;
    report.cascade_links = cond.cascade();
    report.links_short = !sel.filled;
    for (const auto& [e, why] : sel.skipped)
      if (why != SkipReason::AlreadyRemoved) ++report.link_skips;
  }

  if (event.weights_to_remove > 0) {
    struct Scored {
      double score;
      WeightRef ref;
    };
    std::vector<Scored> ranked;
    std::vector<std::size_t> unmasked(fabric.links().size(), 0);
    for (const auto& l : fabric.links()) {
      if (!l.alive) continue;
      const auto& p = l.block.weight;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        if (p.is_masked(i)) continue;
        ++unmasked[l.id];
        ranked.push_back({weight_score(l, i), WeightRef{static_cast<std::uint32_t>(l.id),
                                                        static_cast<std::uint32_t>(i)}});
      }
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const Scored& a, const Scored& b) { return a.score < b.score; });
    std::vector<WeightRef> order;
    order.reserve(ranked.size());
    for (const auto& r : ranked) order.push_back(r.ref);
    FilterKeepsOneCondition cond(std::move(unmasked));
    auto sel = select_prunable<WeightRef>(std::span<const WeightRef>(order), event.weights_to_remove, cond);
    for (const WeightRef& w : sel.selected) {
      auto& p = fabric.link(w.link).block.weight;
      p.ensure_mask()[w.index] = T{0};
      p.value[w.index] = T{0};
    }
    report.masked_weights = sel.selected.size();
    report.weights_short = !sel.filled;
    report.weight_skips = sel.skipped.size();
  }

  report.alive_links = fabric.alive_link_count();
  report.live_params = live_param_count(fabric);
  return report;
}

}  // namespace cnf
