#include "ule/optimizer.hpp"

#include <cmath>

namespace ule {

template <typename Scalar>
void Optimizer<Scalar>::step(Network<Scalar>& net, const GradMap<Scalar>& grads) {
  using Array = typename Tensor<Scalar>::Array;
  for (const auto& p : net.parameters()) {
    if (!p.trainable) continue;
    auto g = grads.find(p.name);
    if (g == grads.end() || !g->second.defined()) {
      throw ArgumentError("optimizer: missing gradient for trainable parameter '" + p.name + "'");
    }
    if (g->second.shape() != p.value.shape()) {
      throw ShapeError("optimizer: gradient for '" + p.name + "' has shape " + shape_str(g->second.shape()) +
                       ", parameter has " + shape_str(p.value.shape()));
    }
  }
  ++steps_;
  const auto lr = static_cast<Scalar>(config_.lr);
  const auto wd = static_cast<Scalar>(config_.weight_decay);
  for (auto& p : net.parameters()) {
    if (!p.trainable) continue;
    const Array& theta = p.value.values();
    Array g = grads.at(p.name).values();
    if (wd != Scalar(0)) g += wd * theta;
    Slot& slot = state_[p.name];
    if (slot.first.size() == 0) {
      slot.first = Array::Zero(theta.size());
      slot.second = Array::Zero(theta.size());
    }
    Array updated;
    if (config_.kind == OptimizerKind::sgd) {
      if (config_.momentum != 0.0) {
        slot.first = static_cast<Scalar>(config_.momentum) * slot.first + g;
        updated = theta - lr * slot.first;
      } else {
        updated = theta - lr * g;
      }
    } else {
      const auto b1 = static_cast<Scalar>(config_.beta1);
      const auto b2 = static_cast<Scalar>(config_.beta2);
      slot.first = b1 * slot.first + (Scalar(1) - b1) * g;
      slot.second = b2 * slot.second + (Scalar(1) - b2) * g.square();
      const auto c1 = static_cast<Scalar>(1.0 - std::pow(config_.beta1, static_cast<double>(steps_)));
      const auto c2 = static_cast<Scalar>(1.0 - std::pow(config_.beta2, static_cast<double>(steps_)));
      updated = theta - lr * (slot.first / c1) / ((slot.second / c2).sqrt() + static_cast<Scalar>(config_.eps));
    }
    p.value = Tensor<Scalar>(p.value.shape(), std::move(updated));
  }
}

template <typename Scalar>
GradMap<Scalar> name_grads(const Network<Scalar>& net, const std::vector<Tensor<Scalar>>& grads) {
  const auto names = net.trainable_names();
  if (names.size() != grads.size()) throw ArgumentError("name_grads: gradient count does not match trainable parameters");
  GradMap<Scalar> out;
  for (std::size_t i = 0; i < names.size(); ++i) out.emplace(names[i], grads[i]);
  return out;
}

template class Optimizer<float>;
template class Optimizer<double>;
template GradMap<float> name_grads(const Network<float>&, const std::vector<Tensor<float>>&);
template GradMap<double> name_grads(const Network<double>&, const std::vector<Tensor<double>>&);

}  // namespace ule
