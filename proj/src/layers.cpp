#include "mudeep/layers.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "mudeep/hash.hpp"

namespace mudeep {

void ConvSpec::validate() const {
  if (out_channels == 0 || in_channels == 0 || kernel_h == 0 || kernel_w == 0)
    throw ConfigError("conv spec " + str() + ": channel counts and kernel sizes must be positive");
  if (stride != 1 && stride != 2) throw ConfigError("conv spec " + str() + ": stride must be 1 or 2");
}

std::string ConvSpec::str() const {
  std::ostringstream os;
  os << out_channels << '@' << kernel_h << 'x' << kernel_w << 'x' << in_channels;
  if (stride == 2) os << '*';
  return os.str();
}

template <class T>
typename ParameterRegistry<T>::ParamPtr ParameterRegistry<T>::get_or_create(const std::string& name,
                                                                           const Shape& shape, ParamKind kind,
                                                                           std::size_t fan_in) {
  if (auto it = by_name_.find(name); it != by_name_.end()) {
    const auto& p = it->second;
    if (p->value().shape() != shape || p->kind() != kind)
      throw ConfigError("parameter '" + name + "' already exists with shape " + shape_str(p->value().shape()) +
                        ", requested " + shape_str(shape));
    return p;
  }
  auto p = std::make_shared<Parameter<T>>(name, Tensor<T>(shape), kind, fan_in);
  by_name_.emplace(name, p);
  ordered_.push_back(p);
  init_parameter(*p, 0);
  return p;
}

template <class T>
typename ParameterRegistry<T>::ParamPtr ParameterRegistry<T>::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

template <class T>
void ParameterRegistry<T>::bind_spec(const std::string& key, const ConvSpec& spec) {
  auto [it, inserted] = specs_.emplace(key, spec);
  if (!inserted && !(it->second == spec))
    throw ConfigError("tie key '" + key + "' is bound to " + it->second.str() + ", cannot reuse it for " + spec.str());
}

template <class T>
std::size_t ParameterRegistry<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : ordered_)
    if (p->trainable()) n += p->value().numel();
  return n;
}

template <class T>
void init_parameter(Parameter<T>& p, std::uint64_t seed) {
  Tensor<T>& v = p.value();
  switch (p.kind()) {
    case ParamKind::weight: {
      Fnv1a h;
      h.update_value(seed);
      h.update(p.name());
      std::mt19937_64 rng(h.value());
      const double stddev = std::sqrt(2.0 / static_cast<double>(std::max<std::size_t>(1, p.fan_in())));
      std::normal_distribution<double> dist(0.0, stddev);
      for (auto& x : v.data()) x = static_cast<T>(dist(rng));
      break;
    }
    case ParamKind::bias:
    case ParamKind::bn_beta:
    case ParamKind::running_mean: v.fill(T(0)); break;
    case ParamKind::bn_gamma:
    case ParamKind::running_var: v.fill(T(1)); break;
    case ParamKind::fusion_alpha: v.fill(T(0.25)); break;
  }
}

template <class T>
void init_parameters(ParameterRegistry<T>& registry, std::uint64_t seed) {
  for (const auto& p : registry.all()) init_parameter(*p, seed);
}

template <class T>
Conv2d<T>::Conv2d(const ConvSpec& spec, ParameterRegistry<T>& registry, const std::string& key) : spec_(spec) {
  spec.validate();
  registry.bind_spec(key, spec);
  const std::size_t fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
  weight_ = registry.get_or_create(key + ".conv.weight",
                                   {spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w},
                                   ParamKind::weight, fan_in);
  bias_ = registry.get_or_create(key + ".conv.bias", {spec.out_channels}, ParamKind::bias);
}

template <class T>
Var<T> Conv2d<T>::forward(Graph<T>& g, const Var<T>& x) {
  return conv2d(g, x, weight_->var(), bias_->var(), spec_.geometry());
}

template <class T>
Shape Conv2d<T>::output_shape(const Shape& in) const {
  if (in.size() != 4 || in[1] != spec_.in_channels)
    throw ShapeError("conv " + spec_.str() + " cannot take input " + shape_str(in));
  const auto geo = spec_.geometry();
  return {in[0], spec_.out_channels, window_out_size(in[2], spec_.kernel_h, geo.stride, geo.pad_h),
          window_out_size(in[3], spec_.kernel_w, geo.stride, geo.pad_w)};
}

template <class T>
BatchNorm<T>::BatchNorm(std::size_t channels, ParameterRegistry<T>& registry, const std::string& key)
    : channels_(channels) {
  gamma_ = registry.get_or_create(key + ".bn.gamma", {channels}, ParamKind::bn_gamma);
  beta_ = registry.get_or_create(key + ".bn.beta", {channels}, ParamKind::bn_beta);
  running_mean_ = registry.get_or_create(key + ".bn.running_mean", {channels}, ParamKind::running_mean);
  running_var_ = registry.get_or_create(key + ".bn.running_var", {channels}, ParamKind::running_var);
}

template <class T>
Var<T> BatchNorm<T>::forward(Graph<T>& g, const Var<T>& x) {
  return batch_norm(g, x, gamma_->var(), beta_->var(), running_mean_->value(), running_var_->value());
}

template <class T>
Var<T> Pool2d<T>::forward(Graph<T>& g, const Var<T>& x) {
  return kind_ == PoolKind::max ? max_pool2d(g, x, k_, stride_, pad_) : avg_pool2d(g, x, k_, stride_, pad_);
}

template <class T>
Shape Pool2d<T>::output_shape(const Shape& in) const {
  if (in.size() != 4) throw ShapeError("pooling needs a rank-4 input, got " + shape_str(in));
  return {in[0], in[1], window_out_size(in[2], k_, stride_, pad_), window_out_size(in[3], k_, stride_, pad_)};
}

template <class T>
std::string Pool2d<T>::describe() const {
  std::ostringstream os;
  os << (kind_ == PoolKind::max ? "maxpool " : "avgpool ") << k_ << 'x' << k_ << " s" << stride_ << " p" << pad_;
  return os.str();
}

template <class T>
FullyConnected<T>::FullyConnected(std::size_t in, std::size_t out, ParameterRegistry<T>& registry,
                                  const std::string& key)
    : in_(in), out_(out) {
  if (in == 0 || out == 0) throw ConfigError("fully connected layer '" + key + "' needs positive widths");
  weight_ = registry.get_or_create(key + ".fc.weight", {out, in}, ParamKind::weight, in);
  bias_ = registry.get_or_create(key + ".fc.bias", {out}, ParamKind::bias);
}

template <class T>
Var<T> FullyConnected<T>::forward(Graph<T>& g, const Var<T>& x) {
  return fully_connected(g, x, weight_->var(), bias_->var());
}

template <class T>
Shape FullyConnected<T>::output_shape(const Shape& in) const {
  if (in.size() != 2 || in[1] != in_)
    throw ShapeError("fc " + std::to_string(in_) + "->" + std::to_string(out_) + " cannot take input " +
                     shape_str(in));
  return {in[0], out_};
}

template <class T>
std::string FullyConnected<T>::describe() const {
  return "fc " + std::to_string(in_) + "->" + std::to_string(out_);
}

template <class T>
Dropout<T>::Dropout(double p) : p_(p) {
  if (!(p >= 0.0 && p < 1.0)) throw InvalidArgument("dropout probability must lie in [0,1), got " + std::to_string(p));
}

template <class T>
std::string Dropout<T>::describe() const {
  std::ostringstream os;
  os << "dropout " << p_;
  return os.str();
}

template <class T>
Shape Flatten<T>::output_shape(const Shape& in) const {
  if (in.size() < 2) throw ShapeError("flatten needs a batch dimension, got " + shape_str(in));
  std::size_t rest = 1;
  for (std::size_t i = 1; i < in.size(); ++i) rest *= in[i];
  return {in[0], rest};
}

template <class T>
LayerStack<T>& LayerStack<T>::push(std::unique_ptr<Layer<T>> layer) {
  layers_.push_back(std::move(layer));
  return *this;
}

template <class T>
LayerStack<T>& LayerStack<T>::append(LayerStack&& other) {
  for (auto& l : other.layers_) layers_.push_back(std::move(l));
  other.layers_.clear();
  return *this;
}

template <class T>
Var<T> LayerStack<T>::forward(Graph<T>& g, const Var<T>& x) const {
  Var<T> h = x;
  for (const auto& l : layers_) h = l->forward(g, h);
  return h;
}

template <class T>
Shape LayerStack<T>::output_shape(const Shape& in) const {
  Shape s = in;
  for (const auto& l : layers_) s = l->output_shape(s);
  return s;
}

template <class T>
std::vector<std::shared_ptr<Parameter<T>>> LayerStack<T>::parameters() const {
  std::vector<std::shared_ptr<Parameter<T>>> out;
  for (const auto& l : layers_)
    for (auto& p : l->parameters())
      if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
  return out;
}

template <class T>
std::size_t LayerStack<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters())
    if (p->trainable()) n += p->value().numel();
  return n;
}

template <class T>
std::size_t LayerStack<T>::conv_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_)
    if (dynamic_cast<const Conv2d<T>*>(l.get())) ++n;
  return n;
}

template <class T>
LayerStack<T> make_cfilter_block(const ConvSpec& spec, ParameterRegistry<T>& registry, const std::string& tie_key) {
  LayerStack<T> s;
  s.push(std::make_unique<Conv2d<T>>(spec, registry, tie_key));
  s.push(std::make_unique<BatchNorm<T>>(spec.out_channels, registry, tie_key));
  s.push(std::make_unique<Relu<T>>());
  return s;
}

template <class T>
LayerStack<T> make_fc_block(std::size_t in, std::size_t out, ParameterRegistry<T>& registry, const std::string& key) {
  LayerStack<T> s;
  s.push(std::make_unique<FullyConnected<T>>(in, out, registry, key));
  s.push(std::make_unique<BatchNorm<T>>(out, registry, key));
  s.push(std::make_unique<Relu<T>>());
  return s;
}

#define MUDEEP_INSTANTIATE_LAYERS(T)                                                                     \
  template class ParameterRegistry<T>;                                                                   \
  template void init_parameters(ParameterRegistry<T>&, std::uint64_t);                                   \
  template void init_parameter(Parameter<T>&, std::uint64_t);                                            \
  template class Conv2d<T>;                                                                              \
  template class BatchNorm<T>;                                                                           \
  template class Pool2d<T>;                                                                              \
  template class FullyConnected<T>;                                                                      \
  template class Dropout<T>;                                                                             \
  template class Flatten<T>;                                                                             \
  template class LayerStack<T>;                                                                          \
  template LayerStack<T> make_cfilter_block(const ConvSpec&, ParameterRegistry<T>&, const std::string&); \
  template LayerStack<T> make_fc_block(std::size_t, std::size_t, ParameterRegistry<T>&, const std::string&);

MUDEEP_INSTANTIATE_LAYERS(float)
MUDEEP_INSTANTIATE_LAYERS(double)

}  // namespace mudeep
