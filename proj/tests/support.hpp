#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "cnf/autodiff.hpp"
#include "cnf/tensor.hpp"

namespace cnf::testing {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(u(rng));
  return t;
}

template <typename T = double>
Parameter<T> random_param(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return Parameter<T>(random_tensor<T>(std::move(shape), rng, lo, hi));
}

// ||a - n|| / (||a|| + ||n||). The scale is floored at 1e-5 so gradients
// that vanish analytically (a conv bias feeding batch norm) compare against
// round-off rather than against zero.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  const double denom = std::sqrt(na) + std::sqrt(nn);
  return std::sqrt(diff) / std::max(denom, 1e-5);
}

struct GradCheck {
  double worst = 0;
  std::size_t checked = 0;
};

/// Compares Parameter::grad after one backward pass of `loss` against central
/// differences of the same scalar. `loss` builds a fresh tape each call.
template <typename T>
GradCheck finite_difference_check(const std::vector<Parameter<T>*>& params,
                                  const std::function<double(Tape<T>&, bool)>& loss, double step) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<T> tape;
    loss(tape, true);
  }
  GradCheck out;
  for (auto* p : params) {
    std::vector<double> analytic(p->value.size()), numeric(p->value.size());
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      analytic[i] = static_cast<double>(p->grad[i]);
      const T saved = p->value[i];
      p->value[i] = static_cast<T>(saved + step);
      Tape<T> t1(false);
      const double up = loss(t1, false);
      p->value[i] = static_cast<T>(saved - step);
      Tape<T> t2(false);
      const double down = loss(t2, false);
      p->value[i] = saved;
      numeric[i] = (up - down) / (2 * step);
    }
    out.worst = std::max(out.worst, relative_error(analytic, numeric));
    ++out.checked;
  }
  return out;
}

}  // namespace cnf::testing
