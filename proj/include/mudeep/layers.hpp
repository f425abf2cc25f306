#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mudeep/autodiff.hpp"
#include "mudeep/ops.hpp"

namespace mudeep {

/// One convolution filter bank ("number@kh x kw x depth" plus stride).
/// Padding defaults to 1 on a side whose kernel extent is 3 and 0 otherwise.
struct ConvSpec {
  std::size_t out_channels = 0;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t in_channels = 0;
  std::size_t stride = 1;
  std::optional<std::size_t> pad_h;
  std::optional<std::size_t> pad_w;

  std::size_t effective_pad_h() const { return pad_h.value_or(kernel_h == 3 ? 1 : 0); }
  std::size_t effective_pad_w() const { return pad_w.value_or(kernel_w == 3 ? 1 : 0); }
  ConvGeometry geometry() const { return {stride, effective_pad_h(), effective_pad_w()}; }
  void validate() const;
  // "48@3x3x3" with a trailing "*" for stride 2.
  std::string str() const;

  friend bool operator==(const ConvSpec& a, const ConvSpec& b) {
    return a.out_channels == b.out_channels && a.kernel_h == b.kernel_h && a.kernel_w == b.kernel_w &&
           a.in_channels == b.in_channels && a.stride == b.stride && a.effective_pad_h() == b.effective_pad_h() &&
           a.effective_pad_w() == b.effective_pad_w();
  }
};

/// Name-keyed parameter store. Asking twice for the same name returns the
/// same Parameter, which is how Siamese weight tying is realized.
template <class T>
class ParameterRegistry {
 public:
  using ParamPtr = std::shared_ptr<Parameter<T>>;

  ParamPtr get_or_create(const std::string& name, const Shape& shape, ParamKind kind, std::size_t fan_in = 0);
  ParamPtr find(const std::string& name) const;
  // Throws ConfigError if `key` was previously bound to a different spec.
  void bind_spec(const std::string& key, const ConvSpec& spec);

  // Registration order.
  const std::vector<ParamPtr>& all() const noexcept { return ordered_; }
  std::size_t trainable_count() const;

 private:
  std::map<std::string, ParamPtr> by_name_;
  std::vector<ParamPtr> ordered_;
  std::map<std::string, ConvSpec> specs_;
};

// He-Gaussian weights, zero biases, unit BN scale, zero BN shift, running
// mean 0 / variance 1, fusion weights 0.25. Each parameter draws from its own
// stream derived from (seed, name), so the result does not depend on the
// order parameters were registered in.
template <class T>
void init_parameters(ParameterRegistry<T>& registry, std::uint64_t seed);
template <class T>
void init_parameter(Parameter<T>& p, std::uint64_t seed);

template <class T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Var<T> forward(Graph<T>& g, const Var<T>& x) = 0;
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual std::string describe() const = 0;
  virtual std::vector<std::shared_ptr<Parameter<T>>> parameters() const { return {}; }
};

template <class T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(const ConvSpec& spec, ParameterRegistry<T>& registry, const std::string& key);
  Var<T> forward(Graph<T>& g, const Var<T>& x) override;
  Shape output_shape(const Shape& in) const override;
  std::string describe() const override { return "conv " + spec_.str(); }
  std::vector<std::shared_ptr<Parameter<T>>> parameters() const override { return {weight_, bias_}; }
  const ConvSpec& spec() const noexcept { return spec_; }

 private:
  ConvSpec spec_;
  std::shared_ptr<Parameter<T>> weight_, bias_;
};

template <class T>
class BatchNorm final : public Layer<T> {
 public:
  BatchNorm(std::size_t channels, ParameterRegistry<T>& registry, const std::string& key);
  Var<T> forward(Graph<T>& g, const Var<T>& x) override;
  Shape output_shape(const Shape& in) const override { return in; }
  std::string describe() const override { return "batchnorm " + std::to_string(channels_); }
  std::vector<std::shared_ptr<Parameter<T>>> parameters() const override {
    return {gamma_, beta_, running_mean_, running_var_};
  }

 private:
  std::size_t channels_;
  std::shared_ptr<Parameter<T>> gamma_, beta_, running_mean_, running_var_;
};

template <class T>
class Relu final : public Layer<T> {
 public:
  Var<T> forward(Graph<T>& g, const Var<T>& x) override { return relu(g, x); }
  Shape output_shape(const Shape& in) const override { return in; }
  std::string describe() const override { return "relu"; }
};

enum class PoolKind { max, average };

template <class T>
class Pool2d final : public Layer<T> {
 public:
  Pool2d(PoolKind kind, std::size_t k, std::size_t stride, std::size_t pad)
      : kind_(kind), k_(k), stride_(stride), pad_(pad) {}
  Var<T> forward(Graph<T>& g, const Var<T>& x) override;
  Shape output_shape(const Shape& in) const override;
  std::string describe() const override;

 private:
  PoolKind kind_;
  std::size_t k_, stride_, pad_;
};

template <class T>
class FullyConnected final : public Layer<T> {
 public:
  FullyConnected(std::size_t in, std::size_t out, ParameterRegistry<T>& registry, const std::string& key);
  Var<T> forward(Graph<T>& g, const Var<T>& x) override;
  Shape output_shape(const Shape& in) const override;
  std::string describe() const override;
  std::vector<std::shared_ptr<Parameter<T>>> parameters() const override { return {weight_, bias_}; }

 private:
  std::size_t in_, out_;
  std::shared_ptr<Parameter<T>> weight_, bias_;
};

template <class T>
class Dropout final : public Layer<T> {
 public:
  explicit Dropout(double p);
  Var<T> forward(Graph<T>& g, const Var<T>& x) override { return dropout(g, x, p_); }
  Shape output_shape(const Shape& in) const override { return in; }
  std::string describe() const override;

 private:
  double p_;
};

template <class T>
class Flatten final : public Layer<T> {
 public:
  Var<T> forward(Graph<T>& g, const Var<T>& x) override { return flatten(g, x); }
  Shape output_shape(const Shape& in) const override;
  std::string describe() const override { return "flatten"; }
};

/// Ordered layer chain. Shape inference composes the members' formulas.
template <class T>
class LayerStack {
 public:
  LayerStack() = default;
  LayerStack(LayerStack&&) noexcept = default;
  LayerStack& operator=(LayerStack&&) noexcept = default;

  LayerStack& push(std::unique_ptr<Layer<T>> layer);
  LayerStack& append(LayerStack&& other);

  Var<T> forward(Graph<T>& g, const Var<T>& x) const;
  Shape output_shape(const Shape& in) const;
  std::vector<std::shared_ptr<Parameter<T>>> parameters() const;  // deduplicated, in order
  std::size_t parameter_count() const;  // trainable scalars
  std::size_t size() const noexcept { return layers_.size(); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }
  std::size_t conv_count() const;

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

// conv -> batch-norm -> relu. Parameters live under "<tie_key>.conv.*" and
// "<tie_key>.bn.*"; a second call with the same key reuses them.
template <class T>
LayerStack<T> make_cfilter_block(const ConvSpec& spec, ParameterRegistry<T>& registry, const std::string& tie_key);

// fc -> batch-norm -> relu, the fully connected analogue.
template <class T>
LayerStack<T> make_fc_block(std::size_t in, std::size_t out, ParameterRegistry<T>& registry, const std::string& key);

}  // namespace mudeep
