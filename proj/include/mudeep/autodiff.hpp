#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mudeep/hash.hpp"
#include "mudeep/tensor.hpp"

namespace mudeep {

enum class Mode { train, eval };

// A value in the computation graph. Gradients are allocated lazily for
// intermediates; parameter nodes own a permanent gradient accumulator.
template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

// Leaf that collects gradients (inputs under a gradient check).
template <class T>
Var<T> leaf(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->grad = Tensor<T>(n->value.shape());
  return n;
}

enum class ParamKind { weight, bias, bn_gamma, bn_beta, running_mean, running_var, fusion_alpha };

const char* param_kind_name(ParamKind kind);

/// Named tensor owned by a model. Two layers that hold the same Parameter
/// are tied: they read one storage and their gradients add up in one
/// accumulator. Running statistics are stored as non-trainable parameters so
/// they are tied and checkpointed the same way.
template <class T>
class Parameter {
 public:
  Parameter(std::string name, Tensor<T> value, ParamKind kind, std::size_t fan_in = 0);

  const std::string& name() const noexcept { return name_; }
  ParamKind kind() const noexcept { return kind_; }
  std::size_t fan_in() const noexcept { return fan_in_; }
  bool trainable() const noexcept { return kind_ != ParamKind::running_mean && kind_ != ParamKind::running_var; }

  bool frozen() const noexcept { return frozen_; }
  void set_frozen(bool frozen);

  Tensor<T>& value() noexcept { return node_->value; }
  const Tensor<T>& value() const noexcept { return node_->value; }
  Tensor<T>& grad() noexcept { return node_->grad; }
  const Tensor<T>& grad() const noexcept { return node_->grad; }
  const Var<T>& var() const noexcept { return node_; }

  void zero_grad() { node_->grad.fill(T(0)); }

 private:
  std::string name_;
  ParamKind kind_;
  std::size_t fan_in_;
  bool frozen_ = false;
  Var<T> node_;
};

// Reverse-mode record of one forward pass.
template <class T>
class Tape {
 public:
  void record(Var<T> output, std::function<void()> backward) {
    entries_.push_back({std::move(output), std::move(backward)});
  }

  // Seeds d(loss)/d(loss) = 1 and runs the recorded closures in exact reverse
  // order. Intermediate gradients are reset first, so calling backward twice
  // adds the parameter gradients twice.
  void backward(const Var<T>& loss);

  void clear() { entries_.clear(); }
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  struct Entry {
    Var<T> output;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
};

// Per-pass context: the tape, train/eval mode, and the dropout stream.
template <class T>
class Graph {
 public:
  explicit Graph(Mode mode = Mode::train, std::uint64_t seed = 0) : mode(mode), rng(seed) {}

  bool training() const noexcept { return mode == Mode::train; }

  Mode mode;
  // Batch-norm layers fold batch statistics into their running averages.
  bool update_running_stats = true;
  // When set, relu masks and max-pool argmax choices are folded into
  // `kinks`. Two passes with equal digests took the same linear piece of the
  // network, which is what a finite-difference stencil has to stay inside.
  bool track_kinks = false;
  Fnv1a kinks;
  Tape<T> tape;
  std::mt19937_64 rng;
};

extern template class Parameter<float>;
extern template class Parameter<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace mudeep
