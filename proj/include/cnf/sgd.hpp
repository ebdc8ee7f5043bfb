#pragma once

#include <cstddef>
#include <unordered_map>
#include <vector>

#include "cnf/errors.hpp"
#include "cnf/tensor.hpp"

namespace cnf {

struct SgdConfig {
  double learning_rate = 0.1;
  double momentum = 0.0;
  double weight_decay = 0.0;

  void validate() const {
    if (!(learning_rate > 0)) throw InputError("sgd: learning rate must be positive");
    if (momentum < 0) throw InputError("sgd: momentum must be nonnegative");
    if (weight_decay < 0) throw InputError("sgd: weight decay must be nonnegative");
  }
};

/// Plain SGD with optional momentum and L2 weight decay:
///   v <- momentum * v + (grad + wd * w);  w <- w - lr * v
/// Masks are re-applied after every step so masked weights stay exactly zero.
template <typename T>
class Sgd {
 public:
  explicit Sgd(SgdConfig config) : config_(config) { config_.validate(); }

  const SgdConfig& config() const noexcept { return config_; }
  void set_learning_rate(double lr) {
    config_.learning_rate = lr;
    config_.validate();
  }

  void step(const std::vector<Parameter<T>*>& params) {
    const T lr = static_cast<T>(config_.learning_rate);
    const T mu = static_cast<T>(config_.momentum);
    const T wd = static_cast<T>(config_.weight_decay);
    for (Parameter<T>* p : params) {
      if (!p->trainable) continue;
      Tensor<T>* buf = nullptr;
      if (config_.momentum > 0) {
        auto [it, inserted] = velocity_.try_emplace(p, Tensor<T>::zeros_like(p->value));
        buf = &it->second;
      }
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        T d = p->grad[i] + wd * p->value[i];
        if (buf) {
          (*buf)[i] = mu * (*buf)[i] + d;
          d = (*buf)[i];
        }
        p->value[i] -= lr * d;
      }
      p->apply_mask();
      if (buf && p->mask)
        for (std::size_t i = 0; i < buf->size(); ++i)
          if (p->is_masked(i)) (*buf)[i] = T{0};
    }
  }

 private:
  SgdConfig config_;
  std::unordered_map<const Parameter<T>*, Tensor<T>> velocity_;
};

template <typename T>
void sgd_step(const std::vector<Parameter<T>*>& params, const SgdConfig& config) {
  Sgd<T>(config).step(params);
}

}  // namespace cnf
