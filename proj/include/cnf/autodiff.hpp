#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cnf/errors.hpp"
#include "cnf/tensor.hpp"

namespace cnf {

/// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

enum class Mode { Train, Eval };

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Reverse-mode tape over whole tensors. Each op appends a node holding its
/// output and a closure that scatters the output gradient into its inputs.
/// Parameters enter as leaves; backward() accumulates into Parameter::grad,
/// skipping masked positions.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  Var param(Parameter<T>& p) {
    Node n;
    n.param = &p;
    n.requires_grad = grad_enabled_ && p.trainable;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = node(v);
    return n.param ? n.param->value : n.value;
  }

  const Tensor<T>& grad(Var v) const {
    const Node& n = node(v);
    if (!backward_done_ || !n.requires_grad) throw UsageError("no gradient recorded for this value");
    return n.grad;
  }

  bool requires_grad(Var v) const { return node(v).requires_grad; }

  // Gradient buffer of an input, for use inside backward closures.
  Tensor<T>& grad_buffer(Var v) { return nodes_[v.id].grad; }
  const Tensor<T>& out_grad(Var v) const { return nodes_[v.id].grad; }

  Var push(Tensor<T> value, bool requires_grad, Backward fn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = grad_enabled_ && requires_grad;
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  /// Populates gradients of everything reachable from `loss`, which must be
  /// a single-element value produced by a recorded forward pass.
  void backward(Var loss) {
    if (nodes_.empty() || !loss.valid() || loss.id >= nodes_.size())
      throw UsageError("backward called without a recorded forward pass");
    if (!grad_enabled_) throw UsageError("backward on a tape recorded without gradients");
    if (value(loss).size() != 1) throw UsageError("backward requires a scalar loss");
    for (std::size_t i = 0; i <= loss.id; ++i) {
      Node& n = nodes_[i];
      if (n.requires_grad) n.grad = Tensor<T>::zeros_like(n.param ? n.param->value : n.value);
    }
    if (!nodes_[loss.id].requires_grad) {
      backward_done_ = true;
      return;
    }
    nodes_[loss.id].grad[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad) continue;
      if (n.param) {
        Parameter<T>& p = *n.param;
        for (std::size_t k = 0; k < n.grad.size(); ++k)
          if (!p.is_masked(k)) p.grad[k] += n.grad[k];
      } else if (n.backward) {
        n.backward(*this);
      }
    }
    backward_done_ = true;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  const Node& node(Var v) const {
    if (!v.valid() || v.id >= nodes_.size()) throw UsageError("invalid tape handle");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank)
    throw StructuralError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                          shape_string(s));
}

template <typename T>
bool any_requires_grad(const Tape<T>& tape, std::initializer_list<Var> vars) {
  for (Var v : vars)
    if (tape.requires_grad(v)) return true;
  return false;
}

// Valid output range [lo, hi) for a kernel tap so that o*stride + k - 1 lands in [0, in).
inline void tap_range(std::size_t in, std::size_t out, std::size_t stride, std::size_t k,
                      std::size_t& lo, std::size_t& hi) {
  // o*stride + k >= 1  and  o*stride + k - 1 <= in - 1
  lo = k >= 1 ? 0 : (1 - k + stride - 1) / stride;
  const std::size_t limit = in + 1 - k;  // o*stride < in + 1 - k
  hi = std::min(out, (limit + stride - 1) / stride);
  if (hi < lo) hi = lo;
}

}  // namespace detail

/// 3x3 convolution, padding 1, stride 1 or 2. Output extents are
/// ceil(H/stride) x ceil(W/stride).
template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernel, Var bias, std::size_t stride) {
  const Tensor<T>& x = tape.value(input);
  const Tensor<T>& k = tape.value(kernel);
  const Tensor<T>& b = tape.value(bias);
  detail::require_rank(x.shape(), 4, "conv2d input");
  detail::require_rank(k.shape(), 4, "conv2d kernel");
  if (stride != 1 && stride != 2) throw InputError("conv2d: stride must be 1 or 2");
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = k.dim(0);
  if (k.dim(1) != Cin)
    throw StructuralError("conv2d: input has " + std::to_string(Cin) + " channels, kernel expects " +
                          std::to_string(k.dim(1)));
  if (k.dim(2) != 3 || k.dim(3) != 3) throw StructuralError("conv2d: kernel must be 3x3");
  if (b.shape() != Shape{Cout}) throw StructuralError("conv2d: bias shape " + shape_string(b.shape()));
  if (H == 0 || W == 0) throw StructuralError("conv2d: empty spatial extent");
  const std::size_t Ho = (H + stride - 1) / stride, Wo = (W + stride - 1) / stride;

  Tensor<T> y(Shape{B, Cout, Ho, Wo});
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t co = 0; co < Cout; ++co) {
      T* out = &y.at(n, co, 0, 0);
      std::fill(out, out + Ho * Wo, b[co]);
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const T* in = &x.at(n, ci, 0, 0);
        for (std::size_t kh = 0; kh < 3; ++kh) {
          std::size_t oh0, oh1;
          detail::tap_range(H, Ho, stride, kh, oh0, oh1);
          for (std::size_t kw = 0; kw < 3; ++kw) {
            const T w = k[((co * Cin + ci) * 3 + kh) * 3 + kw];
            if (w == T{0}) continue;
            std::size_t ow0, ow1;
            detail::tap_range(W, Wo, stride, kw, ow0, ow1);
            for (std::size_t oh = oh0; oh < oh1; ++oh) {
              const T* row = in + (oh * stride + kh - 1) * W;
              T* orow = out + oh * Wo;
              for (std::size_t ow = ow0; ow < ow1; ++ow) orow[ow] += w * row[ow * stride + kw - 1];
            }
          }
        }
      }
    }
  }

  const bool rg = detail::any_requires_grad(tape, {input, kernel, bias});
  Var out{tape.size()};
  return tape.push(std::move(y), rg, [=](Tape<T>& t) {
    const Tensor<T>& gy = t.out_grad(out);
    const Tensor<T>& xv = t.value(input);
    const Tensor<T>& kv = t.value(kernel);
    const bool gx_on = t.requires_grad(input), gk_on = t.requires_grad(kernel),
               gb_on = t.requires_grad(bias);
    for (std::size_t n = 0; n < B; ++n) {
      for (std::size_t co = 0; co < Cout; ++co) {
        const T* g = &gy.at(n, co, 0, 0);
        if (gb_on) {
          T acc{0};
          for (std::size_t i = 0; i < Ho * Wo; ++i) acc += g[i];
          t.grad_buffer(bias)[co] += acc;
        }
        for (std::size_t ci = 0; ci < Cin; ++ci) {
          const T* in = &xv.at(n, ci, 0, 0);
          T* gin = gx_on ? &t.grad_buffer(input).at(n, ci, 0, 0) : nullptr;
          for (std::size_t kh = 0; kh < 3; ++kh) {
            std::size_t oh0, oh1;
            detail::tap_range(H, Ho, stride, kh, oh0, oh1);
            for (std::size_t kw = 0; kw < 3; ++kw) {
              const std::size_t ki = ((co * Cin + ci) * 3 + kh) * 3 + kw;
              const T w = kv[ki];
              std::size_t ow0, ow1;
              detail::tap_range(W, Wo, stride, kw, ow0, ow1);
              T acc{0};
              for (std::size_t oh = oh0; oh < oh1; ++oh) {
                const std::size_t base = (oh * stride + kh - 1) * W;
                const T* grow = g + oh * Wo;
                if (gk_on) {
                  const T* row = in + base;
                  for (std::size_t ow = ow0; ow < ow1; ++ow)
                    acc += grow[ow] * row[ow * stride + kw - 1];
                }
                if (gin && w != T{0}) {
                  T* grow_in = gin + base;
                  for (std::size_t ow = ow0; ow < ow1; ++ow)
                    grow_in[ow * stride + kw - 1] += w * grow[ow];
                }
              }
              if (gk_on) t.grad_buffer(kernel)[ki] += acc;
            }
          }
        }
      }
    }
  });
}

/// x2 bilinear upsampling with half-pixel (align-corners-false) sampling:
/// output pixel o reads source coordinate max((o + 0.5) / 2 - 0.5, 0),
/// interpolating between floor and floor+1 clamped to the last row/column.
template <typename T>
Var upsample_bilinear_x2(Tape<T>& tape, Var input) {
  const Tensor<T>& x = tape.value(input);
  detail::require_rank(x.shape(), 4, "upsample input");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H == 0 || W == 0) throw StructuralError("upsample: empty spatial extent");
  const std::size_t Ho = 2 * H, Wo = 2 * W;

  struct Tap {
    std::size_t i0, i1;
    T l0, l1;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> v(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
      if (src < 0) src = 0;
      const std::size_t i0 = std::min(static_cast<std::size_t>(src), in - 1);
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      const double lam = src - static_cast<double>(i0);
      v[o] = Tap{i0, i1, static_cast<T>(1.0 - lam), static_cast<T>(lam)};
    }
    return v;
  };
  const auto th = taps(H, Ho);
  const auto tw = taps(W, Wo);

  Tensor<T> y(Shape{B, C, Ho, Wo});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* in = &x.at(n, c, 0, 0);
      T* out = &y.at(n, c, 0, 0);
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        const Tap& a = th[oh];
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          const Tap& b = tw[ow];
          out[oh * Wo + ow] = a.l0 * (b.l0 * in[a.i0 * W + b.i0] + b.l1 * in[a.i0 * W + b.i1]) +
                              a.l1 * (b.l0 * in[a.i1 * W + b.i0] + b.l1 * in[a.i1 * W + b.i1]);
        }
      }
    }

  Var out{tape.size()};
  return tape.push(std::move(y), tape.requires_grad(input), [=](Tape<T>& t) {
    const Tensor<T>& gy = t.out_grad(out);
    Tensor<T>& gx = t.grad_buffer(input);
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const T* g = &gy.at(n, c, 0, 0);
        T* gi = &gx.at(n, c, 0, 0);
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const Tap& a = th[oh];
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const Tap& b = tw[ow];
            const T v = g[oh * Wo + ow];
            gi[a.i0 * W + b.i0] += a.l0 * b.l0 * v;
            gi[a.i0 * W + b.i1] += a.l0 * b.l1 * v;
            gi[a.i1 * W + b.i0] += a.l1 * b.l0 * v;
            gi[a.i1 * W + b.i1] += a.l1 * b.l1 * v;
          }
        }
      }
  });
}

/// Per-channel batch normalization. Train mode normalizes with batch
/// statistics and updates `stats` by exponential moving average (running
/// variance uses the unbiased estimate); eval mode uses `stats` unchanged.
template <typename T>
Var batch_norm(Tape<T>& tape, Var input, Var gamma, Var beta, BnStats<T>& stats, Mode mode,
               double momentum = kBatchNormMomentum, double eps = kBatchNormEpsilon) {
  const Tensor<T>& x = tape.value(input);
  detail::require_rank(x.shape(), 4, "batch_norm input");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const std::size_t count = B * HW;
  if (tape.value(gamma).shape() != Shape{C} || tape.value(beta).shape() != Shape{C})
    throw StructuralError("batch_norm: affine parameters must have shape [C]");
  if (stats.mean.shape() != Shape{C}) throw StructuralError("batch_norm: running stats shape");
  if (mode == Mode::Train && count < 2)
    throw InputError("batch_norm: train mode needs at least 2 values per channel");

  const Tensor<T>& g = tape.value(gamma);
  const Tensor<T>& be = tape.value(beta);
  std::vector<T> mean(C), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (mode == Mode::Train) {
      double s = 0, ss = 0;
      for (std::size_t n = 0; n < B; ++n) {
        const T* p = &x.at(n, c, 0, 0);
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(count);
      for (std::size_t n = 0; n < B; ++n) {
        const T* p = &x.at(n, c, 0, 0);
        for (std::size_t i = 0; i < HW; ++i) ss += (p[i] - m) * (p[i] - m);
      }
      const double var = ss / static_cast<double>(count);
      mean[c] = static_cast<T>(m);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
      const double unbiased = ss / static_cast<double>(count - 1);
      stats.mean[c] = static_cast<T>((1 - momentum) * stats.mean[c] + momentum * m);
      stats.var[c] = static_cast<T>((1 - momentum) * stats.var[c] + momentum * unbiased);
    } else {
      mean[c] = stats.mean[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats.var[c]) + eps));
    }
  }

  Tensor<T> xhat(x.shape());
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = &x.at(n, c, 0, 0);
      T* h = &xhat.at(n, c, 0, 0);
      T* o = &y.at(n, c, 0, 0);
      for (std::size_t i = 0; i < HW; ++i) {
        h[i] = (p[i] - mean[c]) * inv_std[c];
        o[i] = g[c] * h[i] + be[c];
      }
    }

  const bool rg = detail::any_requires_grad(tape, {input, gamma, beta});
  Var out{tape.size()};
  const bool train = mode == Mode::Train;
  return tape.push(std::move(y), rg,
                   [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t) {
    const Tensor<T>& gy = t.out_grad(out);
    const Tensor<T>& gv = t.value(gamma);
    for (std::size_t c = 0; c < C; ++c) {
      double sum_dy = 0, sum_dy_xhat = 0;
      for (std::size_t n = 0; n < B; ++n) {
        const T* d = &gy.at(n, c, 0, 0);
        const T* h = &xhat.at(n, c, 0, 0);
        for (std::size_t i = 0; i < HW; ++i) {
          sum_dy += d[i];
          sum_dy_xhat += static_cast<double>(d[i]) * h[i];
        }
      }
      if (t.requires_grad(gamma)) t.grad_buffer(gamma)[c] += static_cast<T>(sum_dy_xhat);
      if (t.requires_grad(beta)) t.grad_buffer(beta)[c] += static_cast<T>(sum_dy);
      if (!t.requires_grad(input)) continue;
      const double gs = static_cast<double>(gv[c]) * inv_std[c];
      const double N = static_cast<double>(count);
      for (std::size_t n = 0; n < B; ++n) {
        const T* d = &gy.at(n, c, 0, 0);
        const T* h = &xhat.at(n, c, 0, 0);
        T* gx = &t.grad_buffer(input).at(n, c, 0, 0);
        for (std::size_t i = 0; i < HW; ++i) {
          if (train)
            gx[i] += static_cast<T>(gs * (d[i] - sum_dy / N - h[i] * sum_dy_xhat / N));
          else
            gx[i] += static_cast<T>(gs * d[i]);
        }
      }
    }
  });
}

template <typename T>
Var relu6(Tape<T>& tape, Var input) {
  const Tensor<T>& x = tape.value(input);
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::min(std::max(x[i], T{0}), T{6});
  Var out{tape.size()};
  return tape.push(std::move(y), tape.requires_grad(input), [=](Tape<T>& t) {
    const Tensor<T>& xv = t.value(input);
    const Tensor<T>& gy = t.out_grad(out);
    Tensor<T>& gx = t.grad_buffer(input);
    for (std::size_t i = 0; i < xv.size(); ++i)
      if (xv[i] > T{0} && xv[i] < T{6}) gx[i] += gy[i];
  });
}

/// Elementwise sum of equally shaped values.
template <typename T>
Var add(Tape<T>& tape, std::span<const Var> inputs) {
  if (inputs.empty()) throw UsageError("add: no inputs");
  Tensor<T> y = tape.value(inputs[0]);
  bool rg = tape.requires_grad(inputs[0]);
  for (std::size_t j = 1; j < inputs.size(); ++j) {
    const Tensor<T>& x = tape.value(inputs[j]);
    if (x.shape() != y.shape())
      throw StructuralError("add: shape " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += x[i];
    rg = rg || tape.requires_grad(inputs[j]);
  }
  Var out{tape.size()};
  std::vector<Var> ins(inputs.begin(), inputs.end());
  return tape.push(std::move(y), rg, [=](Tape<T>& t) {
    const Tensor<T>& gy = t.out_grad(out);
    for (Var v : ins) {
      if (!t.requires_grad(v)) continue;
      Tensor<T>& gx = t.grad_buffer(v);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Var both[] = {a, b};
  return add(tape, std::span<const Var>(both));
}

/// [B, ...] -> [B, prod(...)].
template <typename T>
Var flatten(Tape<T>& tape, Var input) {
  const Tensor<T>& x = tape.value(input);
  if (x.rank() < 1) throw StructuralError("flatten: scalar input");
  const std::size_t B = x.dim(0);
  Tensor<T> y = x.reshaped(Shape{B, B ? x.size() / B : 0});
  Var out{tape.size()};
  return tape.push(std::move(y), tape.requires_grad(input), [=](Tape<T>& t) {
    const Tensor<T>& gy = t.out_grad(out);
    Tensor<T>& gx = t.grad_buffer(input);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

/// y = x W^T + b, x: [B,F], W: [K,F], b: [K].
template <typename T>
Var linear(Tape<T>& tape, Var input, Var weight, Var bias) {
  const Tensor<T>& x = tape.value(input);
  const Tensor<T>& w = tape.value(weight);
  const Tensor<T>& b = tape.value(bias);
  detail::require_rank(x.shape(), 2, "linear input");
  detail::require_rank(w.shape(), 2, "linear weight");
  const std::size_t B = x.dim(0), F = x.dim(1), K = w.dim(0);
  if (w.dim(1) != F)
    throw StructuralError("linear: input has " + std::to_string(F) + " features, weight expects " +
                          std::to_string(w.dim(1)));
  if (b.shape() != Shape{K}) throw StructuralError("linear: bias shape " + shape_string(b.shape()));
  Tensor<T> y(Shape{B, K});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t k = 0; k < K; ++k) {
      T acc = b[k];
      for (std::size_t f = 0; f < F; ++f) acc += x[n * F + f] * w[k * F + f];
      y[n * K + k] = acc;
    }
  const bool rg = detail::any_requires_grad(tape, {input, weight, bias});
  Var out{tape.size()};
  return tape.push(std::move(y), rg, [=](Tape<T>& t) {
    const Tensor<T>& gy = t.out_grad(out);
    const Tensor<T>& xv = t.value(input);
    const Tensor<T>& wv = t.value(weight);
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t k = 0; k < K; ++k) {
        const T g = gy[n * K + k];
        if (t.requires_grad(bias)) t.grad_buffer(bias)[k] += g;
        if (t.requires_grad(weight)) {
          T* gw = t.grad_buffer(weight).data() + k * F;
          for (std::size_t f = 0; f < F; ++f) gw[f] += g * xv[n * F + f];
        }
        if (t.requires_grad(input)) {
          T* gx = t.grad_buffer(input).data() + n * F;
          for (std::size_t f = 0; f < F; ++f) gx[f] += g * wv[k * F + f];
        }
      }
  });
}

/// Mean over the batch of -log softmax(logits)[target], max-subtracted.
template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> targets) {
  const Tensor<T>& z = tape.value(logits);
  detail::require_rank(z.shape(), 2, "softmax_cross_entropy logits");
  const std::size_t B = z.dim(0), K = z.dim(1);
  if (targets.size() != B)
    throw StructuralError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                          " targets for batch of " + std::to_string(B));
  if (B == 0) throw InputError("softmax_cross_entropy: empty batch");
  Tensor<T> probs(z.shape());
  double loss = 0;
  for (std::size_t n = 0; n < B; ++n) {
    const int tgt = targets[n];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= K)
      throw InputError("softmax_cross_entropy: target " + std::to_string(tgt) + " outside [0," +
                       std::to_string(K) + ")");
    const T* row = z.data() + n * K;
    const T mx = *std::max_element(row, row + K);
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(static_cast<double>(row[k] - mx));
    for (std::size_t k = 0; k < K; ++k)
      probs[n * K + k] = static_cast<T>(std::exp(static_cast<double>(row[k] - mx)) / s);
    loss += std::log(s) - static_cast<double>(row[tgt] - mx);
  }
  loss /= static_cast<double>(B);
  std::vector<int> tg(targets.begin(), targets.end());
  Var out{tape.size()};
  return tape.push(Tensor<T>(Shape{1}, static_cast<T>(loss)), tape.requires_grad(logits),
                   [=, probs = std::move(probs), tg = std::move(tg)](Tape<T>& t) {
    const T g = t.out_grad(out)[0] / static_cast<T>(B);
    Tensor<T>& gz = t.grad_buffer(logits);
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t k = 0; k < K; ++k) {
        const T onehot = static_cast<std::size_t>(tg[n]) == k ? T{1} : T{0};
        gz[n * K + k] += g * (probs[n * K + k] - onehot);
      }
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var input) {
  const Tensor<T>& x = tape.value(input);
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
  Var out{tape.size()};
  return tape.push(Tensor<T>(Shape{1}, static_cast<T>(s)), tape.requires_grad(input), [=](Tape<T>& t) {
    const T g = t.out_grad(out)[0];
    Tensor<T>& gx = t.grad_buffer(input);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

/// sum(x * weights) for a constant weight tensor; used to probe full Jacobians.
template <typename T>
Var weighted_sum(Tape<T>& tape, Var input, const Tensor<T>& weights) {
  const Tensor<T>& x = tape.value(input);
  if (x.shape() != weights.shape()) throw StructuralError("weighted_sum: shape mismatch");
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += static_cast<double>(x[i]) * weights[i];
  Var out{tape.size()};
  return tape.push(Tensor<T>(Shape{1}, static_cast<T>(s)), tape.requires_grad(input),
                   [=](Tape<T>& t) {
    const T g = t.out_grad(out)[0];
    Tensor<T>& gx = t.grad_buffer(input);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * weights[i];
  });
}

}  // namespace cnf
