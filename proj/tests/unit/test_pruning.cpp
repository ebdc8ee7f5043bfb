#include <gtest/gtest.h>

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <set>

#include "../oracles.hpp"
#include "../support.hpp"
#include "cnf/errors.hpp"
#include "cnf/fabric.hpp"
#include "cnf/pruning.hpp"

using namespace cnf;
using namespace cnf::testing;

namespace {

FabricDims grid(int L, int S, int C = 1, int K = 2) { return FabricDims::from_resolution(L, C, 1 << (S - 1), K); }

std::size_t link_by_ends(const Fabric<float>& f, NodeId a, NodeId b) {
  for (const auto& l : f.links())
    if (l.from == a && l.to == b) return l.id;
  throw std::runtime_error("no such link");
}

void randomize_weights(Fabric<float>& f, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  for (auto& l : f.links())
    for (auto& v : l.block.weight.value.storage()) v = static_cast<float>(n(rng));
}

}  // namespace

// ---------------------------------------------------------------------------
// scores
// ---------------------------------------------------------------------------

TEST(Scores, WeightCriteria) {
  EXPECT_DOUBLE_EQ(score_weight(Criterion::Magnitude, -2.5), 2.5);
  EXPECT_DOUBLE_EQ(score_weight(Criterion::Sensitivity, 2.0, -0.5), 1.0);
  EXPECT_THROW(score_weight(Criterion::Sensitivity, 2.0), UsageError);
}

TEST(Scores, LinkNorm) {
  auto f = Fabric<float>::build(grid(2, 2), 1);
  auto& l = f.link(0);
  l.block.weight.value.fill(0);
  EXPECT_DOUBLE_EQ(score_link(Criterion::Magnitude, l), 0.0);
  l.block.weight.value[0] = 3;
  l.block.weight.value[5] = -4;
  EXPECT_DOUBLE_EQ(score_link(Criterion::Magnitude, l), 5.0);

  std::mt19937_64 rng(2);
  l.block.weight.value = random_tensor<float>(Shape{1, 1, 3, 3}, rng);
  const auto g = random_tensor<float>(Shape{1, 1, 3, 3}, rng);
  double m = 0, s = 0;
  for (std::size_t i = 0; i < 9; ++i) {
    const double w = l.block.weight.value[i];
    m += w * w;
    s += (w * g[i]) * (w * g[i]);
  }
  EXPECT_NEAR(score_link(Criterion::Magnitude, l), std::sqrt(m), 1e-6);
  EXPECT_NEAR(score_link(Criterion::Sensitivity, l, std::span<const float>(g.storage())), std::sqrt(s), 1e-6);
  EXPECT_THROW(score_link(Criterion::Sensitivity, l), UsageError);
  l.alive = false;
  EXPECT_THROW(score_link(Criterion::Magnitude, l), UsageError);
}

TEST(Scores, MagnitudeOrderIsScaleInvariant) {
  std::mt19937_64 rng(3);
  auto f = Fabric<float>::build(grid(3, 3, 2), 4);
  randomize_weights(f, rng);
  auto order = [&] {
    std::vector<double> s;
    for (const auto& l : f.links()) s.push_back(score_link(Criterion::Magnitude, l));
    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return s[a] < s[b]; });
    return idx;
  };
  const auto before = order();
  for (auto& l : f.links())
    for (auto& v : l.block.weight.value.storage()) v *= 3.0f;
  EXPECT_EQ(order(), before);
}

// ---------------------------------------------------------------------------
// sensitivity
// ---------------------------------------------------------------------------

namespace {

LabeledBatch<double> micro_batch(std::mt19937_64& rng) {
  return {random_tensor<double>(Shape{3, 3, 2, 2}, rng), {0, 1, 1}};
}

}  // namespace

TEST(Sensitivity, DuplicatedBatchIsIdempotent) {
  std::mt19937_64 rng(5);
  auto f = Fabric<double>::build(grid(2, 2, 2), 3);
  const auto b = micro_batch(rng);
  const std::vector<LabeledBatch<double>> one{b}, two{b, b};
  const auto s1 = sensitivity_grads(f, std::span<const LabeledBatch<double>>(one));
  const auto s2 = sensitivity_grads(f, std::span<const LabeledBatch<double>>(two));
  EXPECT_EQ(s2.batches, 2u);
  for (std::size_t i = 0; i < s1.per_link.size(); ++i) EXPECT_EQ(s1.per_link[i], s2.per_link[i]);
  EXPECT_THROW(sensitivity_grads(f, std::span<const LabeledBatch<double>>()), UsageError);
}

TEST(Sensitivity, LeavesFabricUntouched) {
  std::mt19937_64 rng(6);
  auto f = Fabric<double>::build(grid(3, 2, 2), 3);
  const auto before = f;
  const std::vector<LabeledBatch<double>> src{micro_batch(rng), micro_batch(rng)};
  sensitivity_grads(f, std::span<const LabeledBatch<double>>(src));
  for (std::size_t i = 0; i < f.links().size(); ++i) {
    EXPECT_EQ(f.links()[i].block.weight.value, before.links()[i].block.weight.value);
    EXPECT_EQ(f.links()[i].block.stats.mean, before.links()[i].block.stats.mean);
    EXPECT_EQ(f.links()[i].block.stats.var, before.links()[i].block.stats.var);
    EXPECT_EQ(f.links()[i].block.weight.grad, before.links()[i].block.weight.grad);
  }
  EXPECT_EQ(f.stem().stats.mean, before.stem().stats.mean);
}

TEST(Sensitivity, ZeroGradientMeansZeroScore) {
  std::mt19937_64 rng(7);
  auto f = Fabric<double>::build(grid(2, 2, 1), 3);
  std::size_t id = 0;
  for (const auto& l : f.links())
    if (l.from == NodeId{0, 0} && l.to == NodeId{1, 0}) id = l.id;
  f.link(id).block.gamma.value.fill(0);
  const std::vector<LabeledBatch<double>> src{micro_batch(rng)};
  const auto s = sensitivity_grads(f, std::span<const LabeledBatch<double>>(src));
  for (std::size_t i = 0; i < s.per_link[id].size(); ++i) {
    EXPECT_NE(f.link(id).block.weight.value[i], 0.0);
    EXPECT_EQ(s.per_link[id][i], 0.0);
  }
}

TEST(Sensitivity, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(100 + seed);
    auto f = Fabric<double>::build(grid(2, 2, 1), seed);
    for (auto& l : f.links()) l.block.beta.value.fill(1.0);  // keep ReLU6 in its linear range
    const auto b = micro_batch(rng);
    const std::vector<LabeledBatch<double>> src{b};
    const auto s = sensitivity_grads(f, std::span<const LabeledBatch<double>>(src));
    auto loss = [&] {
      Tape<double> t(false);
      Var z = forward(t, f, b.images, Mode::Train);
      return t.value(softmax_cross_entropy(t, z, std::span<const int>(b.labels)))[0];
    };
    const double h = 1e-5;
    for (auto& l : f.links()) {
      std::vector<double> analytic, numeric;
      for (std::size_t i = 0; i < l.block.weight.value.size(); ++i) {
        double& w = l.block.weight.value[i];
        const double w0 = w;
        w = w0 + h;
        const double up = loss();
        w = w0 - h;
        const double down = loss();
        w = w0;
        analytic.push_back(s.per_link[l.id][i]);
        numeric.push_back(std::abs(w0 * (up - down) / (2 * h)));
      }
      EXPECT_LT(cnf::testing::relative_error(analytic, numeric), 1e-2) << "seed " << seed << " link " << l.id;
    }
  }
}

// ---------------------------------------------------------------------------
// selection and conditions
// ---------------------------------------------------------------------------

TEST(Select, DefinitionCases) {
  const std::vector<int> ranked{4, 8, 15, 16, 23};
  auto always = [](std::span<const int>) { return true; };
  EXPECT_TRUE(select_prunable<int>(std::span<const int>(ranked), 0, always).selected.empty());
  const auto three = select_prunable<int>(std::span<const int>(ranked), 3, always);
  EXPECT_EQ(three.selected, (std::vector<int>{4, 8, 15}));
  EXPECT_TRUE(three.filled);
  auto no_evens = [](std::span<const int> p) { return p.back() % 2 == 1; };
  const auto odd = select_prunable<int>(std::span<const int>(ranked), 3, no_evens);
  EXPECT_EQ(odd.selected, (std::vector<int>{15, 23}));
  EXPECT_FALSE(odd.filled);
  EXPECT_EQ(odd.skipped.size(), 3u);
}

TEST(Select, NeverDisconnectsMicroGrid) {
  const auto f = Fabric<float>::build(grid(2, 2));
  std::vector<std::size_t> ids(f.links().size());
  std::iota(ids.begin(), ids.end(), 0);
  do {
    auto cond = [&](std::span<const std::size_t> p) { return link_condition(f, p); };
    const auto sel = select_prunable<std::size_t>(std::span<const std::size_t>(ids), 5, cond);
    std::vector<bool> alive(6, true);
    for (auto id : sel.selected) alive[id] = false;
    EXPECT_TRUE(rescan_reaches(f, alive));
  } while (std::next_permutation(ids.begin(), ids.end()));
}

TEST(LinkCondition, AgreesWithRescanOnEverySubset) {
  const auto f = Fabric<float>::build(grid(3, 2));
  const std::size_t n = f.links().size();
  EXPECT_TRUE(link_condition(f, std::span<const std::size_t>()));
  std::vector<std::size_t> source_cut;
  for (const auto& l : f.links())
    if (l.from == f.input_node()) source_cut.push_back(l.id);
  EXPECT_FALSE(link_condition(f, std::span<const std::size_t>(source_cut)));
  for (std::uint32_t bits = 0; bits < (1u << n); ++bits) {
    std::vector<std::size_t> p;
    std::vector<bool> alive(n, true);
    for (std::size_t i = 0; i < n; ++i)
      if (bits >> i & 1u) {
        p.push_back(i);
        alive[i] = false;
      }
    ASSERT_EQ(link_condition(f, std::span<const std::size_t>(p)), rescan_reaches(f, alive)) << bits;
  }
}

TEST(WeightCondition, KeepsOneWeight) {
  Tensor<float> mask(Shape{1, 1, 3, 3});
  mask[2] = 1;
  mask[7] = 1;
  EXPECT_TRUE(weight_condition(mask, 2));
  EXPECT_TRUE(weight_condition(mask, 7));
  mask[7] = 0;
  EXPECT_FALSE(weight_condition(mask, 2));
  EXPECT_THROW(weight_condition(mask, 7), UsageError);
}

// ---------------------------------------------------------------------------
// cascade
// ---------------------------------------------------------------------------

TEST(Cascade, ChainReactionUpstream) {
  auto f = Fabric<float>::build(grid(4, 3));
  // (0,2) still feeds (1,2): no orphan
  f.link(link_by_ends(f, {0, 2}, {1, 1})).alive = false;
  EXPECT_TRUE(cascade_remove(f).empty());
  f.link(link_by_ends(f, {1, 2}, {2, 2})).alive = false;
  EXPECT_TRUE(cascade_remove(f).empty());
  // last consumer of (1,2) goes: its producers go, then the producer of (0,2)
  f.link(link_by_ends(f, {1, 2}, {2, 1})).alive = false;
  auto killed = cascade_remove(f);
  std::sort(killed.begin(), killed.end());
  std::vector<std::size_t> expect{link_by_ends(f, {0, 1}, {1, 2}), link_by_ends(f, {0, 2}, {1, 2}),
                                  link_by_ends(f, {0, 1}, {0, 2})};
  std::sort(expect.begin(), expect.end());
  EXPECT_EQ(killed, expect);
  EXPECT_FALSE(has_dangling(f));
}

TEST(Cascade, RandomKillSetsMatchPathOracle) {
  std::mt19937_64 rng(8);
  std::bernoulli_distribution kill(0.3);
  int checked = 0;
  for (int trial = 0; trial < 300; ++trial) {
    auto f = Fabric<float>::build(grid(4, 3));
    for (auto& l : f.links()) l.alive = !kill(rng);
    if (!rescan_reaches(f, alive_of(f))) continue;
    const auto expect = on_some_path(f, alive_of(f));
    cascade_remove(f);
    EXPECT_EQ(alive_of(f), expect) << "trial " << trial;
    EXPECT_FALSE(has_dangling(f));
    ++checked;
  }
  EXPECT_GT(checked, 50);
}

// ---------------------------------------------------------------------------
// accounting and plans
// ---------------------------------------------------------------------------

TEST(Reported, AppendixCounts) {
  const auto c10 = FabricDims::from_resolution(8, 64, 32, 10);
  const auto c100 = FabricDims::from_resolution(8, 64, 32, 100);
  const auto voc = FabricDims::from_resolution(8, 64, 64, 20);
  EXPECT_EQ(reported_param_count(c10, 0.05), 228611u);
  EXPECT_EQ(reported_param_count(c10, 0.03), 138194u);
  EXPECT_EQ(reported_param_count(c10, 0.01), 47778u);
  EXPECT_EQ(reported_param_count(c100, 0.05), 234461u);
  EXPECT_EQ(reported_param_count(c100, 0.03), 144044u);
  EXPECT_EQ(reported_param_count(c100, 0.01), 53628u);
  EXPECT_EQ(reported_param_count(voc, 0.05), 271876u);
  EXPECT_EQ(reported_param_count(voc, 0.03), 164413u);
  EXPECT_EQ(reported_param_count(voc, 0.01), 56951u);
}

TEST(Reported, FractionHelpers) {
  EXPECT_EQ(floor_fraction(0.05, 4520832), 226041u);
  EXPECT_EQ(ceil_fraction(0.05, 122), 7u);
  EXPECT_EQ(ceil_fraction(0.05, 120), 6u);
  EXPECT_THROW(sparsity_ppm(0.0), InputError);
  EXPECT_THROW(sparsity_ppm(1.0), InputError);
}

TEST(Plan, IterativeEvents) {
  const auto f = Fabric<float>::build(FabricDims::from_resolution(8, 1, 32, 10));
  const auto plan = build_plan(Strategy::Iterative, 0.05, f);
  ASSERT_EQ(plan.events.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(plan.events[i].epoch, 5 + 10 * static_cast<int>(i));
  EXPECT_EQ(plan.budget.total_links, 122u);
  EXPECT_EQ(plan.budget.min_links_kept, 12u);
  EXPECT_EQ(plan.budget.links_kept, 12u);
  EXPECT_EQ(plan.total_links_to_remove(), 110u);
  EXPECT_EQ(plan.budget.total_conv_weights, 12u * 9);
  EXPECT_EQ(plan.total_weights_to_remove(), 12u * 9 - 12);  // ceil(0.05*108)=6 < one per link
  for (const auto& e : plan.events) {
    EXPECT_LE(plan.events.front().links_to_remove - e.links_to_remove, 1u);
    EXPECT_GE(plan.events.front().links_to_remove, e.links_to_remove);
  }
}

TEST(Plan, SingleEventStrategies) {
  const auto f = Fabric<float>::build(FabricDims::from_resolution(8, 64, 32, 10));
  const auto early = build_plan(Strategy::Early, 0.05, f);
  ASSERT_EQ(early.events.size(), 1u);
  EXPECT_EQ(early.events[0].epoch, 5);
  EXPECT_EQ(early.events[0].links_to_remove, 110u);
  EXPECT_EQ(early.events[0].weights_to_remove, 12u * 36864 - ceil_fraction(0.05, 12u * 36864));
  const auto late = build_plan(Strategy::Late, 0.05, f);
  ASSERT_EQ(late.events.size(), 1u);
  EXPECT_EQ(late.events[0].epoch, 75);
  EXPECT_EQ(late.total_links_to_remove(), early.total_links_to_remove());
  EXPECT_THROW(build_plan(Strategy::Early, 1.5, f), InputError);
}

TEST(Plan, QuotaSplit) {
  EXPECT_EQ(split_quota(110, 8), (std::vector<std::size_t>{14, 14, 14, 14, 14, 14, 13, 13}));
  EXPECT_EQ(split_quota(3, 8), (std::vector<std::size_t>{1, 1, 1, 0, 0, 0, 0, 0}));
  for (std::size_t t = 0; t < 50; ++t) {
    const auto q = split_quota(t, 8);
    EXPECT_EQ(std::accumulate(q.begin(), q.end(), std::size_t{0}), t);
    EXPECT_LE(*std::max_element(q.begin(), q.end()) - *std::min_element(q.begin(), q.end()), 1u);
  }
}

TEST(Plan, OverriddenEpochsMerge) {
  const auto f = Fabric<float>::build(grid(4, 3));
  PlanOptions opt;
  opt.epochs = std::vector<int>{1, 1, 3};
  const auto plan = build_plan(Strategy::Iterative, 0.2, f, opt);
  EXPECT_EQ(plan.events.size(), 2u);
  EXPECT_EQ(plan.warnings.size(), 1u);
  EXPECT_EQ(plan.total_links_to_remove(), plan.budget.total_links - plan.budget.links_kept);
}

// ---------------------------------------------------------------------------
// application
// ---------------------------------------------------------------------------

TEST(Apply, ZeroQuotasChangeNothing) {
  std::mt19937_64 rng(9);
  auto f = Fabric<float>::build(grid(3, 3, 2), 2);
  const auto before = f;
  const auto r = apply_event(f, PruneEvent{5, 0, 0}, Criterion::Magnitude);
  EXPECT_TRUE(r.killed_links.empty());
  EXPECT_TRUE(r.cascade_links.empty());
  EXPECT_EQ(r.masked_weights, 0u);
  EXPECT_FALSE(r.incomplete());
  EXPECT_EQ(alive_of(f), alive_of(before));
  for (std::size_t i = 0; i < f.links().size(); ++i) EXPECT_FALSE(f.links()[i].block.weight.mask.has_value());
}

TEST(Apply, SensitivityRequiresScores) {
  auto f = Fabric<float>::build(grid(2, 2));
  EXPECT_THROW(apply_event(f, PruneEvent{5, 1, 0}, Criterion::Sensitivity), UsageError);
}

TEST(Apply, MicroGridMatchesGreedyOracleForBothCriteria) {
  std::mt19937_64 rng(10);
  const auto table = connectivity_table(Fabric<float>::build(grid(2, 2), 1));
  for (int trial = 0; trial < 200; ++trial) {
    auto f = Fabric<float>::build(grid(2, 2), 1);
    randomize_weights(f, rng);
    const auto crit = trial % 2 ? Criterion::Sensitivity : Criterion::Magnitude;
    SensitivityScores<float> sens;
    std::vector<double> score;
    for (const auto& l : f.links()) {
      auto g = random_tensor<float>(Shape{1, 1, 3, 3}, rng);
      Tensor<float> s(Shape{1, 1, 3, 3});
      for (std::size_t i = 0; i < 9; ++i) s[i] = std::abs(l.block.weight.value[i] * g[i]);
      score.push_back(crit == Criterion::Magnitude ? score_link(crit, l)
                                                   : score_link(crit, l, std::span<const float>(g.storage())));
      sens.per_link.push_back(s);
    }
    const std::size_t n = 1 + trial % 4;
    auto expect = greedy_link_oracle(f, table, score, n);
    const auto r = apply_event(f, PruneEvent{5, n, 0}, crit, &sens);
    EXPECT_EQ(r.killed_links, expect) << "trial " << trial;
    EXPECT_TRUE(rescan_reaches(f, alive_of(f)));
  }
}

TEST(Apply, RandomSequencesKeepInvariants) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 60; ++trial) {
    const int L = 2 + trial % 4, S = 2 + trial % 3;
    auto f = Fabric<float>::build(grid(L, S, 2), static_cast<std::uint64_t>(trial));
    randomize_weights(f, rng);
    const auto stem = f.stem().weight.value;
    const auto head = f.head_weight().value;
    std::uniform_real_distribution<double> sp(0.05, 0.6);
    const auto plan = build_plan(Strategy::Iterative, sp(rng), f);
    for (const auto& e : plan.events) {
      const auto r = apply_event(f, e, Criterion::Magnitude);
      EXPECT_TRUE(rescan_reaches(f, alive_of(f)));
      EXPECT_FALSE(has_dangling(f));
      if (!r.links_short) {
        EXPECT_EQ(r.killed_links.size() + r.cascade_links.size(), e.links_to_remove);
      }
      if (!r.weights_short) {
        EXPECT_EQ(r.masked_weights, e.weights_to_remove);
      }
      for (const auto& l : f.links()) {
        if (!l.alive || !l.block.weight.mask) continue;
        const auto& m = *l.block.weight.mask;
        EXPECT_TRUE(std::any_of(m.storage().begin(), m.storage().end(), [](float v) { return v != 0; }));
      }
    }
    EXPECT_EQ(f.stem().weight.value, stem);
    EXPECT_EQ(f.head_weight().value, head);
  }
}

TEST(Apply, CascadeCountingFlag) {
  // Killing (0,0)->(0,1) on the micro grid orphans (0,1) and sweeps its two
  // out-links, so with counting on it needs a quota of three.
  auto make = [] {
    auto f = Fabric<float>::build(grid(2, 2), 1);
    for (auto& l : f.links()) l.block.weight.value.fill(1);
    f.link(link_by_ends(f, {0, 0}, {0, 1})).block.weight.value.fill(0.01f);
    return f;
  };
  auto counted = make();
  const auto col = link_by_ends(counted, {0, 0}, {0, 1});
  auto r1 = apply_event(counted, PruneEvent{5, 1, 0}, Criterion::Magnitude);
  EXPECT_TRUE(std::find(r1.killed_links.begin(), r1.killed_links.end(), col) == r1.killed_links.end());
  auto free_cascade = make();
  auto r2 = apply_event(free_cascade, PruneEvent{5, 1, 0}, Criterion::Magnitude, static_cast<const SensitivityScores<float>*>(nullptr),
                        ApplyOptions{false});
  EXPECT_EQ(r2.killed_links, std::vector<std::size_t>{col});
  EXPECT_EQ(r2.cascade_links.size(), 2u);
  auto exact = make();
  auto r3 = apply_event(exact, PruneEvent{5, 3, 0}, Criterion::Magnitude);
  EXPECT_EQ(r3.killed_links.front(), col);
  EXPECT_EQ(r3.killed_links.size() + r3.cascade_links.size(), 3u);
}

TEST(Apply, WeightStageRanksGloballyAndMasksPermanently) {
  auto f = Fabric<float>::build(grid(2, 2), 1);
  float v = 1;
  for (auto& l : f.links())
    for (auto& w : l.block.weight.value.storage()) w = v++;
  const auto r = apply_event(f, PruneEvent{5, 0, 10}, Criterion::Magnitude);
  EXPECT_EQ(r.masked_weights, 10u);
  // the ten smallest magnitudes are link 0's nine weights (one must survive) and link 1's first two
  EXPECT_EQ(r.weight_skips, 1u);
  const auto& m0 = *f.link(0).block.weight.mask;
  EXPECT_EQ(std::count(m0.storage().begin(), m0.storage().end(), 0.0f), 8);
  EXPECT_EQ(f.link(0).block.weight.value[8], 9.0f);
  const auto& m1 = *f.link(1).block.weight.mask;
  EXPECT_EQ(std::count(m1.storage().begin(), m1.storage().end(), 0.0f), 2);
  EXPECT_EQ(f.link(1).block.weight.value[0], 0.0f);
}
