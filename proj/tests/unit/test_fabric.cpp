#include <gtest/gtest.h>

#include <cctype>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <tuple>

#include "../support.hpp"
#include "cnf/checkpoint.hpp"
#include "cnf/errors.hpp"
#include "cnf/fabric.hpp"

using namespace cnf;
using cnf::testing::random_tensor;

namespace {

using Edge = std::tuple<int, int, int, int>;  // from layer, from scale, to layer, to scale

// The connectivity rule written out directly: each node of layer l+1 reads
// the up-to-three nearest scales of layer l; the first and last layers also
// carry one link down each column.
std::set<Edge> enumerate_edges(int L, int S) {
  std::set<Edge> e;
  for (int l = 0; l + 1 < L; ++l)
    for (int s = 0; s < S; ++s)
      for (int d : {-1, 0, 1})
        if (s + d >= 0 && s + d < S) e.insert({l, s, l + 1, s + d});
  for (int l : {0, L - 1})
    for (int s = 0; s + 1 < S; ++s) e.insert({l, s, l, s + 1});
  return e;
}

std::set<Edge> fabric_edges(const Fabric<float>& f) {
  std::set<Edge> e;
  for (const auto& l : f.links()) e.insert({l.from.layer, l.from.scale, l.to.layer, l.to.scale});
  return e;
}

// Exhaustive DFS over every input->output path; returns the longest with and
// without Up links (-1 when none exists).
std::pair<int, int> brute_longest(const Fabric<float>& f) {
  int best_no_up = -1, best_any = -1;
  std::function<void(NodeId, int, bool)> dfs = [&](NodeId n, int len, bool used_up) {
    if (n == f.output_node()) {
      best_any = std::max(best_any, len);
      if (!used_up) best_no_up = std::max(best_no_up, len);
    }
    for (const auto& l : f.links())
      if (l.alive && l.from == n) dfs(l.to, len + 1, used_up || l.direction == Direction::Up);
  };
  dfs(f.input_node(), 0, false);
  return {best_no_up, best_any};
}

bool brute_reaches(const Fabric<float>& f) {
  std::set<std::pair<int, int>> seen{{0, 0}};
  bool grew = true;
  while (grew) {
    grew = false;
    for (const auto& l : f.links())
      if (l.alive && seen.contains({l.from.layer, l.from.scale}) && seen.insert({l.to.layer, l.to.scale}).second)
        grew = true;
  }
  return seen.contains({f.output_node().layer, f.output_node().scale});
}

// Small recursive-descent checker for the DOT subset: graph, subgraph, attribute
// statements, node statements and edge statements with bracketed attribute lists.
class DotChecker {
 public:
  explicit DotChecker(std::string text) : s_(std::move(text)) {}

  bool parse() {
    try {
      expect_id("digraph");
      id();
      block();
      ws();
      return pos_ == s_.size();
    } catch (const std::exception&) {
      return false;
    }
  }

  std::set<std::string> nodes;
  std::vector<std::pair<std::string, std::string>> edges;
  std::vector<std::map<std::string, std::string>> edge_attrs;

 private:
  void ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  bool peek(char c) {
    ws();
    return pos_ < s_.size() && s_[pos_] == c;
  }
  bool peek_str(const std::string& t) {
    ws();
    return s_.compare(pos_, t.size(), t) == 0;
  }
  void expect(char c) {
    if (!peek(c)) throw std::runtime_error(std::string("expected ") + c);
    ++pos_;
  }
  std::string id() {
    ws();
    if (pos_ < s_.size() && s_[pos_] == '"') {
      const std::size_t end = s_.find('"', pos_ + 1);
      if (end == std::string::npos) throw std::runtime_error("unterminated string");
      std::string v = s_.substr(pos_ + 1, end - pos_ - 1);
      pos_ = end + 1;
      return v;
    }
    const std::size_t start = pos_;
    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_' ||
                                s_[pos_] == '.'))
      ++pos_;
    if (start == pos_) throw std::runtime_error("expected identifier");
    return s_.substr(start, pos_ - start);
  }
  void expect_id(const std::string& want) {
    if (id() != want) throw std::runtime_error("expected " + want);
  }
  std::map<std::string, std::string> attrs() {
    std::map<std::string, std::string> a;
    expect('[');
    while (!peek(']')) {
      const std::string k = id();
      expect('=');
      a[k] = id();
      if (peek(',') || peek(';')) ++pos_;
    }
    expect(']');
    return a;
  }
  void block() {
    expect('{');
    while (!peek('}')) statement();
    expect('}');
  }
  void statement() {
    if (peek_str("subgraph")) {
      id();
      id();
      block();
      return;
    }
    const std::string a = id();
    if (peek('=')) {
      ++pos_;
      id();
    } else if (peek_str("->")) {
      pos_ += 2;
      const std::string b = id();
      edges.emplace_back(a, b);
      edge_attrs.push_back(peek('[') ? attrs() : std::map<std::string, std::string>{});
    } else if (a == "node" || a == "edge" || a == "graph") {
      attrs();
    } else {
      nodes.insert(a);
      if (peek('[')) attrs();
    }
    expect(';');
  }

  std::string s_;
  std::size_t pos_ = 0;
};

// Straight-line reference pieces for the hand-rolled forward pass.
using Img = std::vector<std::vector<std::vector<double>>>;  // [C][H][W]

Img ref_conv(const Img& x, const Tensor<float>& k, const Tensor<float>& b, int stride) {
  const int C = static_cast<int>(x.size()), H = static_cast<int>(x[0].size()), W = static_cast<int>(x[0][0].size());
  const int O = static_cast<int>(k.dim(0));
  const int Ho = (H + stride - 1) / stride, Wo = (W + stride - 1) / stride;
  Img y(static_cast<std::size_t>(O), std::vector<std::vector<double>>(static_cast<std::size_t>(Ho),
                                                                      std::vector<double>(static_cast<std::size_t>(Wo))));
  for (int o = 0; o < O; ++o)
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        double s = b[static_cast<std::size_t>(o)];
        for (int c = 0; c < C; ++c)
          for (int a = 0; a < 3; ++a)
            for (int e = 0; e < 3; ++e) {
              const int r = i * stride + a - 1, q = j * stride + e - 1;
              if (r >= 0 && r < H && q >= 0 && q < W)
                s += x[static_cast<std::size_t>(c)][static_cast<std::size_t>(r)][static_cast<std::size_t>(q)] *
                     k.at(static_cast<std::size_t>(o), static_cast<std::size_t>(c), static_cast<std::size_t>(a),
                          static_cast<std::size_t>(e));
              }
        y[static_cast<std::size_t>(o)][static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = s;
      }
  return y;
}

// A 1x1 map upsampled x2 is four copies of the pixel.
Img ref_up_from_1x1(const Img& x) {
  Img y = x;
  for (auto& ch : y) ch = {{ch[0][0], ch[0][0]}, {ch[0][0], ch[0][0]}};
  return y;
}

Img ref_bn_relu6(Img x, const ConvBn<float>& b) {
  for (std::size_t c = 0; c < x.size(); ++c)
    for (auto& row : x[c])
      for (auto& v : row) {
        v = (v - b.stats.mean[c]) / std::sqrt(static_cast<double>(b.stats.var[c]) + 1e-5) * b.gamma.value[c] +
            b.beta.value[c];
        v = std::min(std::max(v, 0.0), 6.0);
      }
  return x;
}

Img ref_add(Img a, const Img& b) {
  for (std::size_t c = 0; c < a.size(); ++c)
    for (std::size_t i = 0; i < a[c].size(); ++i)
      for (std::size_t j = 0; j < a[c][i].size(); ++j) a[c][i][j] += b[c][i][j];
  return a;
}

const Link<float>& find_link(const Fabric<float>& f, NodeId from, NodeId to) {
  for (const auto& l : f.links())
    if (l.from == from && l.to == to) return l;
  throw std::runtime_error("no such link");
}

}  // namespace

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

TEST(Build, LinkCountsMatchEnumeration) {
  for (int L = 2; L <= 8; ++L)
    for (int S = 2; S <= 6; ++S) {
      const auto f = Fabric<float>::build(FabricDims::from_resolution(L, 1, 1 << (S - 1), 2));
      const auto expect = enumerate_edges(L, S);
      EXPECT_EQ(fabric_edges(f), expect) << L << "x" << S;
      EXPECT_EQ(f.links().size(), expect.size());
      EXPECT_EQ(f.dims().link_count(), expect.size());
      EXPECT_EQ(f.alive_link_count(), expect.size());
    }
}

TEST(Build, PaperGridExamples) {
  EXPECT_EQ(Fabric<float>::build(FabricDims::from_resolution(6, 1, 8, 2)).links().size(), 56u);
  EXPECT_EQ(Fabric<float>::build(FabricDims::from_resolution(2, 1, 2, 2)).links().size(), 6u);
}

TEST(Build, DirectionsAgreeWithEndpoints) {
  const auto f = Fabric<float>::build(FabricDims::from_resolution(5, 2, 16, 3));
  for (const auto& l : f.links()) {
    switch (l.direction) {
      case Direction::Same:
        EXPECT_EQ(l.to.scale, l.from.scale);
        EXPECT_EQ(l.to.layer, l.from.layer + 1);
        break;
      case Direction::Down:
        EXPECT_EQ(l.to.scale, l.from.scale + 1);
        EXPECT_EQ(l.to.layer, l.from.layer + 1);
        break;
      case Direction::Up:
        EXPECT_EQ(l.to.scale, l.from.scale - 1);
        EXPECT_EQ(l.to.layer, l.from.layer + 1);
        break;
      case Direction::ColumnDown:
        EXPECT_EQ(l.to.scale, l.from.scale + 1);
        EXPECT_EQ(l.to.layer, l.from.layer);
        EXPECT_TRUE(l.from.layer == 0 || l.from.layer == 4);
        break;
    }
    EXPECT_EQ(l.stride(), l.direction == Direction::Down || l.direction == Direction::ColumnDown ? 2u : 1u);
    EXPECT_TRUE(l.alive);
  }
  EXPECT_TRUE(brute_reaches(f));
  EXPECT_TRUE(input_reaches_output(f));
}

TEST(Build, ResolutionMustBePowerOfTwo) {
  EXPECT_THROW(FabricDims::from_resolution(4, 8, 12, 3), InputError);
  EXPECT_EQ(FabricDims::from_resolution(8, 64, 32, 10).scales, 6);
  EXPECT_EQ(FabricDims::from_resolution(8, 64, 64, 20).scales, 7);
  FabricDims bad{4, 3, 8, 16, 3};
  EXPECT_THROW(bad.validate(), InputError);
  FabricDims one_layer{1, 2, 8, 2, 3};
  EXPECT_THROW(one_layer.validate(), InputError);
}

TEST(Build, SameSeedSameWeights) {
  const auto a = Fabric<float>::build(FabricDims::from_resolution(3, 4, 8, 3), 42);
  const auto b = Fabric<float>::build(FabricDims::from_resolution(3, 4, 8, 3), 42);
  const auto c = Fabric<float>::build(FabricDims::from_resolution(3, 4, 8, 3), 43);
  for (std::size_t i = 0; i < a.links().size(); ++i)
    EXPECT_EQ(a.links()[i].block.weight.value, b.links()[i].block.weight.value);
  EXPECT_FALSE(a.links()[0].block.weight.value == c.links()[0].block.weight.value);
}

// ---------------------------------------------------------------------------
// parameter accounting
// ---------------------------------------------------------------------------

TEST(ParamCount, BaselineTotals) {
  EXPECT_EQ(param_count(FabricDims::from_resolution(8, 64, 32, 10)).total, 4523402u);
  EXPECT_EQ(param_count(FabricDims::from_resolution(8, 64, 32, 100)).total, 4529252u);
  EXPECT_EQ(param_count(FabricDims::from_resolution(8, 64, 64, 20)).total, 5376340u);
}

TEST(ParamCount, ComponentFormulas) {
  const auto d = FabricDims::from_resolution(8, 64, 32, 10);
  EXPECT_EQ(link_param_count(d), 64u * 64 * 9 + 64 + 2 * 64);
  EXPECT_EQ(link_param_count(d), 37056u);
  EXPECT_EQ(stem_param_count(d), 3u * 64 * 9 + 64 + 2 * 64);
  EXPECT_EQ(head_param_count(d), 64u * 10 + 10);
  const auto b = param_count(d);
  EXPECT_EQ(b.total, b.stem_params + b.link_params + b.head_params);
  EXPECT_EQ(b.link_params, 122u * 37056);
}

TEST(ParamCount, FabricCountsMatchTensorsAndTrackAliveLinks) {
  auto f = Fabric<float>::build(FabricDims::from_resolution(3, 4, 8, 5), 1);
  std::size_t n = 0;
  for (auto* p : f.parameters()) n += p->value.size();
  EXPECT_EQ(param_count(f).total, n);
  EXPECT_EQ(param_count(f).total, param_count(f.dims()).total);
  EXPECT_EQ(live_param_count(f), n);
  f.link(3).alive = false;
  EXPECT_EQ(param_count(f).total, n - link_param_count(f.dims()));
  f.link(5).block.weight.ensure_mask()[0] = 0;
  EXPECT_EQ(live_param_count(f), n - link_param_count(f.dims()) - 1);
}

TEST(ParamCount, SvhnConfigurationDoesNotReach287594) {
  // The published SVHN baseline does not decompose under this architecture.
  EXPECT_NE(param_count(FabricDims::from_resolution(8, 32, 32, 10)).total, 287594u);
}

// ---------------------------------------------------------------------------
// longest linear path
// ---------------------------------------------------------------------------

TEST(LongestPath, FullGrids) {
  EXPECT_EQ(longest_linear_path(Fabric<float>::build(FabricDims::from_resolution(8, 1, 32, 2))), 12);
  EXPECT_EQ(longest_linear_path(Fabric<float>::build(FabricDims::from_resolution(2, 1, 2, 2))), 2);
  for (int L = 2; L <= 6; ++L)
    for (int S = 2; S <= 5; ++S) {
      const auto f = Fabric<float>::build(FabricDims::from_resolution(L, 1, 1 << (S - 1), 2));
      EXPECT_EQ(longest_linear_path(f), (L - 1) + (S - 1));
      EXPECT_EQ(longest_linear_path(f), brute_longest(f).first);
    }
}

TEST(LongestPath, DiagonalOnly) {
  auto f = Fabric<float>::build(FabricDims::from_resolution(2, 1, 2, 2));
  for (auto& l : f.links()) l.alive = l.from == NodeId{0, 0} && l.to == NodeId{1, 1};
  EXPECT_EQ(longest_linear_path(f), 1);
}

TEST(LongestPath, RandomPrunedGridsMatchExhaustiveSearch) {
  std::mt19937_64 rng(3);
  std::bernoulli_distribution keep(0.6);
  for (int trial = 0; trial < 60; ++trial) {
    auto f = Fabric<float>::build(FabricDims::from_resolution(2 + trial % 3, 1, 1 << (1 + trial % 3), 2));
    for (auto& l : f.links()) l.alive = keep(rng);
    const auto [no_up, any] = brute_longest(f);
    const int expect = no_up >= 0 ? no_up : std::max(any, 0);
    EXPECT_EQ(longest_linear_path(f), expect) << "trial " << trial;
    EXPECT_EQ(input_reaches_output(f), brute_reaches(f));
  }
}

// ---------------------------------------------------------------------------
// DOT export
// ---------------------------------------------------------------------------

TEST(Dot, FullMicroGrid) {
  const auto f = Fabric<float>::build(FabricDims::from_resolution(2, 1, 2, 2));
  DotChecker dot(export_dot(f));
  ASSERT_TRUE(dot.parse());
  EXPECT_EQ(dot.nodes.size(), 4u);
  EXPECT_EQ(dot.edges.size(), 6u);
  EXPECT_TRUE(dot.nodes.contains("n0_0"));
  EXPECT_TRUE(dot.nodes.contains("n1_1"));
}

TEST(Dot, PrunedLinkOmittedOrDashed) {
  auto f = Fabric<float>::build(FabricDims::from_resolution(3, 1, 4, 2));
  f.link(2).alive = false;
  DotChecker hidden(export_dot(f));
  ASSERT_TRUE(hidden.parse());
  EXPECT_EQ(hidden.edges.size(), f.links().size() - 1);
  for (const auto& a : hidden.edge_attrs) EXPECT_NE(a.at("id"), "link2");

  DotChecker shown(export_dot(f, DotOptions{true}));
  ASSERT_TRUE(shown.parse());
  EXPECT_EQ(shown.edges.size(), f.links().size());
  int dashed = 0;
  for (const auto& a : shown.edge_attrs)
    if (a.contains("style") && a.at("style") == "dashed") {
      ++dashed;
      EXPECT_EQ(a.at("id"), "link2");
    }
  EXPECT_EQ(dashed, 1);
}

TEST(Dot, CheckerRejectsMalformedText) {
  EXPECT_FALSE(DotChecker("digraph g { a -> ; }").parse());
  EXPECT_FALSE(DotChecker("digraph g { a -> b;").parse());
  EXPECT_TRUE(DotChecker("digraph g { a -> b [id=\"x\"]; }").parse());
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

TEST(Forward, LogitShape) {
  std::mt19937_64 rng(1);
  auto f = Fabric<float>::build(FabricDims::from_resolution(3, 4, 8, 7), 2);
  Tape<float> t(false);
  const auto x = random_tensor<float>(Shape{2, 3, 8, 8}, rng);
  EXPECT_EQ(t.value(forward(t, f, x, Mode::Eval)).shape(), (Shape{2, 7}));
  EXPECT_THROW(forward(t, f, random_tensor<float>(Shape{2, 3, 4, 4}, rng), Mode::Eval), StructuralError);
}

TEST(Forward, ZeroConvolutionsLeaveHeadBias) {
  std::mt19937_64 rng(2);
  auto f = Fabric<float>::build(FabricDims::from_resolution(3, 2, 4, 3), 3);
  f.stem().weight.value.fill(0);
  f.stem().bias.value.fill(0);
  for (auto& l : f.links()) {
    l.block.weight.value.fill(0);
    l.block.bias.value.fill(0);
  }
  for (std::size_t k = 0; k < 3; ++k) f.head_bias().value[k] = static_cast<float>(k) - 0.25f;
  for (Mode m : {Mode::Eval, Mode::Train}) {
    Tape<float> t(false);
    const auto& z = t.value(forward(t, f, random_tensor<float>(Shape{2, 3, 4, 4}, rng), m));
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(z[n * 3 + k], f.head_bias().value[k]);
  }
}

TEST(Forward, MicroFabricMatchesStraightLineProgram) {
  std::mt19937_64 rng(4);
  auto f = Fabric<float>::build(FabricDims::from_resolution(2, 1, 2, 3), 7);
  std::uniform_real_distribution<double> mean(-0.2, 0.2), var(0.5, 1.5), gam(0.5, 1.5), bet(0.5, 1.0);
  auto jitter = [&](ConvBn<float>& b) {
    b.stats.mean[0] = static_cast<float>(mean(rng));
    b.stats.var[0] = static_cast<float>(var(rng));
    b.gamma.value[0] = static_cast<float>(gam(rng));
    b.beta.value[0] = static_cast<float>(bet(rng));
  };
  jitter(f.stem());
  for (auto& l : f.links()) jitter(l.block);
  const auto x = random_tensor<float>(Shape{1, 3, 2, 2}, rng, 0, 1);

  Img img(3, std::vector<std::vector<double>>(2, std::vector<double>(2)));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) img[c][i][j] = x.at(0, c, i, j);
  auto link_out = [&](NodeId a, NodeId b, const Img& in) {
    const auto& l = find_link(f, a, b);
    Img y = ref_conv(in, l.block.weight.value, l.block.bias.value, static_cast<int>(l.stride()));
    if (l.direction == Direction::Up) y = ref_up_from_1x1(y);
    return ref_bn_relu6(y, l.block);
  };
  const Img a00 = ref_bn_relu6(ref_conv(img, f.stem().weight.value, f.stem().bias.value, 1), f.stem());
  const Img a01 = link_out({0, 0}, {0, 1}, a00);
  const Img a10 = ref_add(link_out({0, 0}, {1, 0}, a00), link_out({0, 1}, {1, 0}, a01));
  const Img a11 =
      ref_add(ref_add(link_out({0, 0}, {1, 1}, a00), link_out({0, 1}, {1, 1}, a01)), link_out({1, 0}, {1, 1}, a10));

  Tape<float> t(false);
  const auto& z = t.value(forward(t, f, x, Mode::Eval));
  for (std::size_t k = 0; k < 3; ++k) {
    const double expect = f.head_weight().value[k] * a11[0][0][0] + f.head_bias().value[k];
    EXPECT_NEAR(z[k], expect, 1e-5) << "class " << k;
  }
}

TEST(Forward, SilencedLinkEqualsDeadLink) {
  std::mt19937_64 rng(5);
  auto f = Fabric<float>::build(FabricDims::from_resolution(3, 2, 8, 4), 9);
  for (auto& l : f.links()) {
    l.block.stats.mean.fill(0.1f);
    l.block.stats.var.fill(0.9f);
    l.block.beta.value.fill(0.3f);
  }
  const auto x = random_tensor<float>(Shape{2, 3, 8, 8}, rng);
  // link into a node that has other alive in-links
  std::size_t victim = 0;
  for (const auto& l : f.links())
    if (l.to == NodeId{2, 1} && l.direction == Direction::Same) victim = l.id;
  auto silenced = f;
  silenced.link(victim).block.gamma.value.fill(0);
  silenced.link(victim).block.beta.value.fill(0);
  auto dead = f;
  dead.link(victim).alive = false;
  Tape<float> t1(false), t2(false), t3(false);
  const auto& zs = t1.value(forward(t1, silenced, x, Mode::Eval));
  const auto& zd = t2.value(forward(t2, dead, x, Mode::Eval));
  const auto& zf = t3.value(forward(t3, f, x, Mode::Eval));
  EXPECT_EQ(zs, zd);
  EXPECT_FALSE(zs == zf);
}

TEST(Forward, UnreachableOutputIsStructural) {
  auto f = Fabric<float>::build(FabricDims::from_resolution(2, 1, 2, 2));
  for (auto& l : f.links()) l.alive = false;
  Tape<float> t(false);
  EXPECT_THROW(forward(t, f, Tensor<float>(Shape{1, 3, 2, 2}), Mode::Eval), StructuralError);
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

std::filesystem::path temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "cnf_fabric_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Checkpoint, RoundTripIsLossless) {
  std::mt19937_64 rng(6);
  auto f = Fabric<float>::build(FabricDims::from_resolution(3, 3, 8, 4), 11);
  f.link(1).alive = false;
  f.link(4).block.weight.ensure_mask()[7] = 0;
  f.link(4).block.weight.apply_mask();
  f.link(6).block.stats.mean.fill(0.25f);
  const auto path = temp_file("roundtrip.ckpt");
  save_checkpoint(f, path);
  auto g = load_checkpoint<float>(path);
  EXPECT_EQ(g.dims(), f.dims());
  ASSERT_EQ(g.links().size(), f.links().size());
  for (std::size_t i = 0; i < f.links().size(); ++i) {
    const auto& a = f.links()[i];
    const auto& b = g.links()[i];
    EXPECT_EQ(a.alive, b.alive);
    EXPECT_EQ(a.block.weight.value, b.block.weight.value);
    EXPECT_EQ(a.block.weight.mask.has_value(), b.block.weight.mask.has_value());
    if (a.block.weight.mask) {
      EXPECT_EQ(*a.block.weight.mask, *b.block.weight.mask);
    }
    EXPECT_EQ(a.block.stats.mean, b.block.stats.mean);
    EXPECT_EQ(a.block.stats.var, b.block.stats.var);
    EXPECT_EQ(a.block.gamma.value, b.block.gamma.value);
  }
  EXPECT_EQ(f.head_weight().value, g.head_weight().value);
  const auto x = random_tensor<float>(Shape{2, 3, 8, 8}, rng);
  Tape<float> t1(false), t2(false);
  EXPECT_EQ(t1.value(forward(t1, f, x, Mode::Eval)), t2.value(forward(t2, g, x, Mode::Eval)));
}

TEST(Checkpoint, RejectsForeignAndTruncatedFiles) {
  const auto f = Fabric<float>::build(FabricDims::from_resolution(2, 2, 4, 2), 1);
  const auto path = temp_file("good.ckpt");
  save_checkpoint(f, path);
  EXPECT_THROW(load_checkpoint<double>(path), FormatError);

  const auto bad = temp_file("bad.ckpt");
  {
    std::ofstream os(bad, std::ios::binary);
    os << "NOTACKPT and more";
  }
  EXPECT_THROW(load_checkpoint<float>(bad), FormatError);

  const auto cut = temp_file("cut.ckpt");
  std::filesystem::copy_file(path, cut, std::filesystem::copy_options::overwrite_existing);
  std::filesystem::resize_file(cut, std::filesystem::file_size(path) - 10);
  EXPECT_THROW(load_checkpoint<float>(cut), FormatError);
  EXPECT_THROW(load_checkpoint<float>(temp_file("missing.ckpt")), FormatError);
}
