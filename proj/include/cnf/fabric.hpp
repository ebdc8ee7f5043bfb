#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cnf/autodiff.hpp"
#include "cnf/errors.hpp"
#include "cnf/tensor.hpp"

namespace cnf {

enum class Direction { Same, Down, Up, ColumnDown };

inline const char* to_string(Direction d) {
  switch (d) {
    case Direction::Same: return "same";
    case Direction::Down: return "down";
    case Direction::Up: return "up";
    case Direction::ColumnDown: return "column";
  }
  return "?";
}

struct NodeId {
  int layer = 0;
  int scale = 0;
  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

/// Grid and head dimensions. `scales` is derived from the input resolution so
/// that the bottom scale is 1x1.
struct FabricDims {
  int layers = 8;
  int scales = 6;
  int channels = 64;
  int resolution = 32;
  int classes = 10;

  static FabricDims from_resolution(int layers, int channels, int resolution, int classes) {
    if (resolution < 2 || !std::has_single_bit(static_cast<unsigned>(resolution)))
      throw InputError("fabric: input resolution must be a power of two >= 2, got " +
                       std::to_string(resolution));
    const int scales = std::bit_width(static_cast<unsigned>(resolution));  // log2(R) + 1
    return FabricDims{layers, scales, channels, resolution, classes};
  }

  void validate() const {
    if (layers < 2) throw InputError("fabric: need at least 2 layers");
    if (scales < 2) throw InputError("fabric: need at least 2 scales");
    if (channels < 1) throw InputError("fabric: need at least 1 channel");
    if (classes < 1) throw InputError("fabric: need at least 1 class");
    if (scales > 30 || resolution != (1 << (scales - 1)))
      throw InputError("fabric: resolution " + std::to_string(resolution) + " inconsistent with " +
                       std::to_string(scales) + " scales (need 2^(S-1))");
  }

  std::size_t link_count() const {
    return static_cast<std::size_t>((layers - 1) * (3 * scales - 2) + 2 * (scales - 1));
  }

  friend bool operator==(const FabricDims&, const FabricDims&) = default;
};

/// conv 3x3 (+bias) followed by batch norm.
template <typename T>
struct ConvBn {
  Parameter<T> weight;  // [Cout, Cin, 3, 3]
  Parameter<T> bias;    // [Cout]
  Parameter<T> gamma;   // [Cout]
  Parameter<T> beta;    // [Cout]
  BnStats<T> stats;

  ConvBn() = default;
  ConvBn(std::size_t cin, std::size_t cout)
      : weight(Tensor<T>(Shape{cout, cin, 3, 3})),
        bias(Tensor<T>(Shape{cout})),
        gamma(Tensor<T>(Shape{cout}, T{1})),
        beta(Tensor<T>(Shape{cout})),
        stats(cout) {}

  std::size_t param_count() const {
    return weight.value.size() + bias.value.size() + gamma.value.size() + beta.value.size();
  }

  template <typename Rng>
  void init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(weight.value.dim(1) * 9));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& w : weight.value.storage()) w = static_cast<T>(u(rng));
    for (auto& b : bias.value.storage()) b = static_cast<T>(u(rng));
  }

  std::vector<Parameter<T>*> parameters() { return {&weight, &bias, &gamma, &beta}; }
};

template <typename T>
struct Link {
  std::size_t id = 0;
  NodeId from;
  NodeId to;
  Direction direction = Direction::Same;
  ConvBn<T> block;
  bool alive = true;

  std::size_t stride() const {
    return direction == Direction::Down || direction == Direction::ColumnDown ? 2 : 1;
  }
};

struct ParamBreakdown {
  std::size_t stem_params = 0;
  std::size_t link_params = 0;
  std::size_t head_params = 0;
  std::size_t total = 0;
};

/// Layer x scale grid of nodes joined by conv links, with a stem conv+BN
/// feeding node (0,0) and a linear head reading node (L-1,S-1).
template <typename T>
class Fabric {
 public:
  Fabric() = default;

  /// Creates every link of the connectivity pattern, alive: node (l+1,s)
  /// reads (l,s-1), (l,s), (l,s+1) where they exist, and boundary layers
  /// 0 and L-1 carry column links (l,s)->(l,s+1).
  static Fabric build(const FabricDims& dims, std::uint64_t seed = 0) {
    dims.validate();
    Fabric f;
    f.dims_ = dims;
    const auto C = static_cast<std::size_t>(dims.channels);
    std::mt19937_64 rng(seed);
    f.stem_ = ConvBn<T>(3, C);
    f.stem_.init(rng);

    auto add_link = [&](NodeId from, NodeId to, Direction d) {
      Link<T> link;
      link.id = f.links_.size();
      link.from = from;
      link.to = to;
      link.direction = d;
      link.block = ConvBn<T>(C, C);
      link.block.init(rng);
      f.links_.push_back(std::move(link));
    };
    // Ordered by destination node (layer-major), then by source.
    for (int l = 0; l < dims.layers; ++l) {
      for (int s = 0; s < dims.scales; ++s) {
        if (l > 0) {
          if (s > 0) add_link({l - 1, s - 1}, {l, s}, Direction::Down);
          add_link({l - 1, s}, {l, s}, Direction::Same);
          if (s + 1 < dims.scales) add_link({l - 1, s + 1}, {l, s}, Direction::Up);
        }
        if ((l == 0 || l == dims.layers - 1) && s > 0)
          add_link({l, s - 1}, {l, s}, Direction::ColumnDown);
      }
    }

    const auto K = static_cast<std::size_t>(dims.classes);
    f.head_weight_ = Parameter<T>(Tensor<T>(Shape{K, C}));
    f.head_bias_ = Parameter<T>(Tensor<T>(Shape{K}));
    const double bound = 1.0 / std::sqrt(static_cast<double>(C));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& w : f.head_weight_.value.storage()) w = static_cast<T>(u(rng));
    for (auto& b : f.head_bias_.value.storage()) b = static_cast<T>(u(rng));
    f.index_adjacency();
    return f;
  }

  const FabricDims& dims() const noexcept { return dims_; }
  std::size_t node_count() const { return static_cast<std::size_t>(dims_.layers * dims_.scales); }
  std::size_t node_index(NodeId n) const {
    return static_cast<std::size_t>(n.layer * dims_.scales + n.scale);
  }
  NodeId node_at(std::size_t index) const {
    return NodeId{static_cast<int>(index) / dims_.scales, static_cast<int>(index) % dims_.scales};
  }
  NodeId input_node() const { return {0, 0}; }
  NodeId output_node() const { return {dims_.layers - 1, dims_.scales - 1}; }

  std::vector<Link<T>>& links() noexcept { return links_; }
  const std::vector<Link<T>>& links() const noexcept { return links_; }
  Link<T>& link(std::size_t id) { return links_.at(id); }
  const Link<T>& link(std::size_t id) const { return links_.at(id); }

  const std::vector<std::size_t>& in_links(NodeId n) const { return in_.at(node_index(n)); }
  const std::vector<std::size_t>& out_links(NodeId n) const { return out_.at(node_index(n)); }

  ConvBn<T>& stem() noexcept { return stem_; }
  const ConvBn<T>& stem() const noexcept { return stem_; }
  Parameter<T>& head_weight() noexcept { return head_weight_; }
  const Parameter<T>& head_weight() const noexcept { return head_weight_; }
  Parameter<T>& head_bias() noexcept { return head_bias_; }
  const Parameter<T>& head_bias() const noexcept { return head_bias_; }

  std::size_t alive_link_count() const {
    return static_cast<std::size_t>(
        std::count_if(links_.begin(), links_.end(), [](const Link<T>& l) { return l.alive; }));
  }

  /// Trainable parameters of the stem, alive links and head.
  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out = stem_.parameters();
    for (auto& l : links_)
      if (l.alive)
        for (auto* p : l.block.parameters()) out.push_back(p);
    out.push_back(&head_weight_);
    out.push_back(&head_bias_);
    return out;
  }

  // Clears gradients everywhere, dead links included.
  void zero_grad() {
    for (auto* p : stem_.parameters()) p->zero_grad();
    for (auto& l : links_)
      for (auto* p : l.block.parameters()) p->zero_grad();
    head_weight_.zero_grad();
    head_bias_.zero_grad();
  }

  // Rebuilds in/out adjacency after links are replaced wholesale (e.g. on load).
  void index_adjacency() {
    in_.assign(node_count(), {});
    out_.assign(node_count(), {});
    for (const auto& l : links_) {
      in_[node_index(l.to)].push_back(l.id);
      out_[node_index(l.from)].push_back(l.id);
    }
  }

  void set_dims(const FabricDims& d) { dims_ = d; }

 private:
  FabricDims dims_;
  ConvBn<T> stem_;
  std::vector<Link<T>> links_;
  Parameter<T> head_weight_;
  Parameter<T> head_bias_;
  std::vector<std::vector<std::size_t>> in_;
  std::vector<std::vector<std::size_t>> out_;
};

template <typename T>
Fabric<T> build_fabric(const FabricDims& dims, std::uint64_t seed = 0) {
  return Fabric<T>::build(dims, seed);
}

inline std::size_t stem_param_count(const FabricDims& d) {
  const auto C = static_cast<std::size_t>(d.channels);
  return 3 * C * 9 + C + 2 * C;
}

inline std::size_t link_param_count(const FabricDims& d) {
  const auto C = static_cast<std::size_t>(d.channels);
  return C * C * 9 + C + 2 * C;
}

inline std::size_t head_param_count(const FabricDims& d) {
  const auto C = static_cast<std::size_t>(d.channels);
  const auto K = static_cast<std::size_t>(d.classes);
  return C * K + K;
}

/// Breakdown for the unpruned fabric of the given dimensions.
inline ParamBreakdown param_count(const FabricDims& d) {
  ParamBreakdown b;
  b.stem_params = stem_param_count(d);
  b.link_params = d.link_count() * link_param_count(d);
  b.head_params = head_param_count(d);
  b.total = b.stem_params + b.link_params + b.head_params;
  return b;
}

/// Breakdown counting whole links that are alive (masks ignored).
template <typename T>
ParamBreakdown param_count(const Fabric<T>& f) {
  ParamBreakdown b;
  b.stem_params = stem_param_count(f.dims());
  b.link_params = f.alive_link_count() * link_param_count(f.dims());
  b.head_params = head_param_count(f.dims());
  b.total = b.stem_params + b.link_params + b.head_params;
  return b;
}

/// Parameters that actually survive: unmasked conv weights plus bias and BN
/// of alive links, plus the fixed stem and head.
template <typename T>
std::size_t live_param_count(const Fabric<T>& f) {
  const auto C = static_cast<std::size_t>(f.dims().channels);
  std::size_t n = stem_param_count(f.dims()) + head_param_count(f.dims());
  for (const auto& l : f.links())
    if (l.alive) n += l.block.weight.unmasked_count() + 3 * C;
  return n;
}

/// True if alive links (minus `excluded`) connect the input node to the output node.
template <typename T>
bool input_reaches_output(const Fabric<T>& f, const std::vector<bool>& excluded = {}) {
  std::vector<bool> seen(f.node_count(), false);
  std::deque<NodeId> queue{f.input_node()};
  seen[f.node_index(f.input_node())] = true;
  while (!queue.empty()) {
    const NodeId n = queue.front();
    queue.pop_front();
    if (n == f.output_node()) return true;
    for (std::size_t id : f.out_links(n)) {
      const auto& l = f.link(id);
      if (!l.alive || (!excluded.empty() && excluded[id])) continue;
      const std::size_t t = f.node_index(l.to);
      if (!seen[t]) {
        seen[t] = true;
        queue.push_back(l.to);
      }
    }
  }
  return false;
}

/// Longest input->output chain of alive links that never upsamples, i.e. a
/// path whose resolution is non-increasing as in a conventional CNN. On the
/// full grid this is (L-1) + (S-1). Falls back to the longest unrestricted
/// path when only upsampling routes remain; 0 if the output is unreachable.
template <typename T>
int longest_linear_path(const Fabric<T>& f) {
  auto longest = [&](bool allow_up) {
    // Node indices are already a topological order: links go to a later
    // layer, or to a larger scale within the same layer.
    std::vector<int> best(f.node_count(), -1);
    best[f.node_index(f.input_node())] = 0;
    for (std::size_t i = 0; i < f.node_count(); ++i) {
      if (best[i] < 0) continue;
      for (std::size_t id : f.out_links(f.node_at(i))) {
        const auto& l = f.link(id);
        if (!l.alive || (!allow_up && l.direction == Direction::Up)) continue;
        auto& b = best[f.node_index(l.to)];
        b = std::max(b, best[i] + 1);
      }
    }
    return best[f.node_index(f.output_node())];
  };
  int len = longest(false);
  if (len < 0) len = longest(true);
  return std::max(len, 0);
}

struct DotOptions {
  bool show_pruned = false;  // draw dead links dashed instead of omitting them
};

/// Graphviz digraph of the grid: one node per (layer, scale), one edge per link.
template <typename T>
std::string export_dot(const Fabric<T>& f, const DotOptions& opt = {}) {
  std::ostringstream os;
  const auto& d = f.dims();
  os << "digraph fabric {\n";
  os << "  rankdir=LR;\n";
  os << "  node [shape=circle, fontsize=10];\n";
  for (int l = 0; l < d.layers; ++l) {
    os << "  subgraph layer_" << l << " {\n    rank=same;\n";
    for (int s = 0; s < d.scales; ++s) {
      os << "    n" << l << "_" << s << " [label=\"" << l << "," << s << "\"";
      const NodeId n{l, s};
      if (n == f.input_node()) os << ", shape=doublecircle, xlabel=\"in\"";
      if (n == f.output_node()) os << ", shape=doublecircle, xlabel=\"out\"";
      os << "];\n";
    }
    os << "  }\n";
  }
  for (const auto& link : f.links()) {
    if (!link.alive && !opt.show_pruned) continue;
    os << "  n" << link.from.layer << "_" << link.from.scale << " -> n" << link.to.layer << "_"
       << link.to.scale << " [id=\"link" << link.id << "\", tooltip=\"" << to_string(link.direction)
       << "\"";
    if (!link.alive) os << ", style=dashed, color=gray";
    os << "];\n";
  }
  os << "}\n";
  return os.str();
}

namespace detail {

template <typename T>
Var conv_bn_relu(Tape<T>& tape, Var x, ConvBn<T>& block, std::size_t stride, bool upsample,
                 Mode mode) {
  Var y = conv2d(tape, x, tape.param(block.weight), tape.param(block.bias), stride);
  if (upsample) y = upsample_bilinear_x2(tape, y);
  y = batch_norm(tape, y, tape.param(block.gamma), tape.param(block.beta), block.stats, mode);
  return relu6(tape, y);
}

}  // namespace detail

/// Records the fabric's forward pass on `tape` and returns logits [B, classes].
/// Each node sums the outputs of its alive in-links; a link applies
/// conv (stride 2 when moving down a scale) -> x2 upsample (when moving up)
/// -> batch norm -> ReLU6.
template <typename T>
Var forward(Tape<T>& tape, Fabric<T>& f, const Tensor<T>& batch, Mode mode) {
  const auto& d = f.dims();
  if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != static_cast<std::size_t>(d.resolution) ||
      batch.dim(3) != static_cast<std::size_t>(d.resolution))
    throw StructuralError("fabric forward: expected input [B,3," + std::to_string(d.resolution) + "," +
                          std::to_string(d.resolution) + "], got " + shape_string(batch.shape()));

  std::vector<std::optional<Var>> act(f.node_count());
  act[f.node_index(f.input_node())] =
      detail::conv_bn_relu(tape, tape.constant(batch), f.stem(), 1, false, mode);

  std::vector<Var> incoming;
  for (std::size_t i = 1; i < f.node_count(); ++i) {
    incoming.clear();
    for (std::size_t id : f.in_links(f.node_at(i))) {
      Link<T>& l = f.link(id);
      if (!l.alive) continue;
      const auto& src = act[f.node_index(l.from)];
      if (!src) continue;
      incoming.push_back(detail::conv_bn_relu(tape, *src, l.block, l.stride(),
                                              l.direction == Direction::Up, mode));
    }
    if (incoming.size() == 1)
      act[i] = incoming.front();
    else if (!incoming.empty())
      act[i] = add(tape, std::span<const Var>(incoming));
  }

  const auto& out = act[f.node_index(f.output_node())];
  if (!out) throw StructuralError("fabric forward: output node receives no alive path");
  Var flat = flatten(tape, *out);
  return linear(tape, flat, tape.param(f.head_weight()), tape.param(f.head_bias()));
}

}  // namespace cnf
