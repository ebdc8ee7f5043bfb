#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cnf/autodiff.hpp"
#include "cnf/data.hpp"
#include "cnf/fabric.hpp"
#include "cnf/pruning.hpp"
#include "cnf/sgd.hpp"

namespace cnf {

struct TrainOptions {
  int batch_size = 64;
  bool augment = true;
  AugmentConfig preprocess;
};

/// Thrown when the loss stops being finite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined key
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E8B5ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Stacks preprocessed (and optionally augmented) images into one batch.
template <typename T>
LabeledBatch<T> make_batch(const ImageDataset<T>& ds, std::span<const int> labels,
                           std::span<const std::size_t> indices, const AugmentConfig& cfg, bool augment_on,
                           std::uint64_t seed) {
  LabeledBatch<T> b;
  std::vector<Tensor<T>> imgs;
  imgs.reserve(indices.size());
  for (std::size_t i : indices) {
    Tensor<T> img = ds.image(i);
    imgs.push_back(augment_on ? augment(img, cfg, detail::mix_seed(seed, i)) : preprocess(img, cfg));
    b.labels.push_back(labels[i]);
  }
  const Shape& s = imgs.front().shape();
  b.images = Tensor<T>(Shape{imgs.size(), s[0], s[1], s[2]});
  const std::size_t v = imgs.front().size();
  for (std::size_t k = 0; k < imgs.size(); ++k) std::copy_n(imgs[k].data(), v, b.images.data() + k * v);
  return b;
}

/// Sequential, un-augmented batches over the whole set (evaluation, scoring).
template <typename T>
std::vector<LabeledBatch<T>> eval_batches(const ImageDataset<T>& ds, std::span<const int> labels,
                                          const AugmentConfig& cfg, int batch_size) {
  std::vector<LabeledBatch<T>> out;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + static_cast<std::size_t>(batch_size)); ++i)
      idx.push_back(i);
    out.push_back(make_batch(ds, labels, idx, cfg, false, 0));
  }
  return out;
}

/// One shuffled pass of minibatch SGD; returns the mean batch loss. A final
/// batch of a single item is dropped (train-mode batch norm needs two).
template <typename T>
double train_epoch(Fabric<T>& fabric, Sgd<T>& opt, const ImageDataset<T>& ds, std::span<const int> labels,
                   const TrainOptions& options, std::uint64_t seed) {
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto bs = static_cast<std::size_t>(options.batch_size);
  double total = 0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::size_t end = std::min(order.size(), start + bs);
    if (end - start < 2) break;
    std::span<const std::size_t> idx(order.data() + start, end - start);
    auto batch = make_batch(ds, labels, idx, options.preprocess, options.augment, seed + start);
    fabric.zero_grad();
    Tape<T> tape;
    Var logits = forward(tape, fabric, batch.images, Mode::Train);
    Var loss = softmax_cross_entropy(tape, logits, std::span<const int>(batch.labels));
    const double l = static_cast<double>(tape.value(loss)[0]);
    if (!std::isfinite(l)) throw DivergenceError("non-finite training loss (" + std::to_string(l) + ")");
    tape.backward(loss);
    opt.step(fabric.parameters());
    total += l;
    ++batches;
  }
  return batches ? total / static_cast<double>(batches) : 0.0;
}

template <typename T>
std::vector<int> predict(Fabric<T>& fabric, const ImageDataset<T>& ds, const AugmentConfig& cfg,
                         int batch_size = 256) {
  std::vector<int> out;
  out.reserve(ds.size());
  const std::vector<int> dummy(ds.size(), 0);
  for (const auto& b : eval_batches(ds, dummy, cfg, batch_size)) {
    Tape<T> tape(false);
    Var logits = forward(tape, fabric, b.images, Mode::Eval);
    const Tensor<T>& z = tape.value(logits);
    const std::size_t K = z.dim(1);
    for (std::size_t n = 0; n < z.dim(0); ++n) {
      const T* row = z.data() + n * K;
      out.push_back(static_cast<int>(std::max_element(row, row + K) - row));
    }
  }
  return out;
}

inline double error_rate(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) throw StructuralError("error_rate: length mismatch");
  if (labels.empty()) return 0.0;
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) wrong += predicted[i] != labels[i];
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

}  // namespace cnf
