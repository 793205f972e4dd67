#pragma once

#include <map>
#include <string>

#include "ule/network.hpp"

namespace ule {

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double momentum = 0.0;  // sgd only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Coupled L2: wd * theta is added to each trainable parameter's gradient.
  double weight_decay = 0.0;
};

template <typename Scalar>
using GradMap = std::map<std::string, Tensor<Scalar>>;

/// SGD with momentum or Adam over the trainable parameters of one network.
template <typename Scalar>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  const OptimizerConfig& config() const { return config_; }

  /// Updates every trainable parameter in place. Frozen parameters are never
  /// touched; a trainable parameter without a gradient is an error.
  void step(Network<Scalar>& net, const GradMap<Scalar>& grads);

 private:
  struct Slot {
    typename Tensor<Scalar>::Array first;
    typename Tensor<Scalar>::Array second;
  };

  OptimizerConfig config_;
  std::map<std::string, Slot> state_;
  long steps_ = 0;
};

/// Pairs trainable parameter names with the gradients `grad` returned for
/// `net.trainable_tensors()`.
template <typename Scalar>
GradMap<Scalar> name_grads(const Network<Scalar>& net, const std::vector<Tensor<Scalar>>& grads);

extern template class Optimizer<float>;
extern template class Optimizer<double>;

}  // namespace ule
