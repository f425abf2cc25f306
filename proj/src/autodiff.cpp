#include "mudeep/autodiff.hpp"

namespace mudeep {

const char* param_kind_name(ParamKind kind) {
  switch (kind) {
    case ParamKind::weight: return "weight";
    case ParamKind::bias: return "bias";
    case ParamKind::bn_gamma: return "bn_gamma";
    case ParamKind::bn_beta: return "bn_beta";
    case ParamKind::running_mean: return "running_mean";
    case ParamKind::running_var: return "running_var";
    case ParamKind::fusion_alpha: return "fusion_alpha";
  }
  return "unknown";
}

template <class T>
Parameter<T>::Parameter(std::string name, Tensor<T> value, ParamKind kind, std::size_t fan_in)
    : name_(std::move(name)), kind_(kind), fan_in_(fan_in), node_(std::make_shared<Node<T>>()) {
  node_->grad = Tensor<T>(value.shape());
  node_->value = std::move(value);
  node_->requires_grad = trainable();
}

template <class T>
void Parameter<T>::set_frozen(bool frozen) {
  frozen_ = frozen;
  node_->requires_grad = trainable() && !frozen;
}

template <class T>
void Tape<T>::backward(const Var<T>& loss) {
  if (loss->value.numel() != 1) throw ShapeError("backward needs a scalar loss, got " + shape_str(loss->value.shape()));
  for (auto& e : entries_) e.output->grad = Tensor<T>();
  if (!loss->requires_grad) return;
  loss->grad_buffer().fill(T(1));
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
    if (!it->output->grad.empty()) it->backward();
}

template class Parameter<float>;
template class Parameter<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace mudeep
