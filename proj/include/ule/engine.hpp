#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ule/dataset.hpp"
#include "ule/network.hpp"
#include "ule/optimizer.hpp"

namespace ule {

/// What the saliency is taken with respect to.
///   input:      d score / d x
///   activation: d score / d A at the network's tap point
///   gram:       no gradient; E = A A^T of the tap activation (batch x batch)
enum class SaliencyMode { input, activation, gram };

/// Scalar that is differentiated, summed over the batch:
///   predicted_logit:    logit of the predicted class
///   logit_sum:          sum of all logits
///   predicted_log_prob: log-softmax of the predicted class
///   centered_logit:     predicted logit minus the mean logit
/// The last two are unchanged by adding the same function to every logit.
enum class Scalarization { predicted_logit, logit_sum, predicted_log_prob, centered_logit };

enum class Distance { mse, l1 };

std::string to_string(SaliencyMode mode);
std::string to_string(Scalarization rule);
std::string to_string(Distance distance);
SaliencyMode parse_saliency_mode(const std::string& text);
Scalarization parse_scalarization(const std::string& text);
Distance parse_distance(const std::string& text);

/// z / max(|z|, 1e-12) per sample; the leading axis indexes samples.
template <typename Scalar>
Tensor<Scalar> normalize_sal(const Tensor<Scalar>& z);

/// The differentiated score of a batch of logits.
template <typename Scalar>
Tensor<Scalar> scalarize(const Tensor<Scalar>& logits, Scalarization rule);

/// Saliency from an already computed forward pass. `x` must be the graph leaf
/// that was fed to the network (input mode); the tap must be graph-linked in
/// activation mode (see Network::ForwardOptions::tap_leaf).
template <typename Scalar>
Tensor<Scalar> saliency_from_output(const typename Network<Scalar>::Output& out, const Tensor<Scalar>& x,
                                    SaliencyMode mode, bool retain, Scalarization rule);

/// Runs an evaluation-mode forward pass on `x` and returns its saliency: shape
/// of x (input), of the tap activation (activation) or (b, b) (gram). With
/// `retain` the result stays differentiable with respect to the parameters.
template <typename Scalar>
Tensor<Scalar> saliency(Network<Scalar>& net, const Tensor<Scalar>& x, SaliencyMode mode, bool retain = false,
                        Scalarization rule = Scalarization::predicted_logit);

/// Inverted-saliency distance between N(-g_s) and N(g_t), averaged over all
/// elements. g_s must be detached.
template <typename Scalar>
Tensor<Scalar> ule_sal_loss(const Tensor<Scalar>& g_s, const Tensor<Scalar>& g_t, Distance distance = Distance::mse);

/// Exponential moving averages of the magnitudes of the two loss terms.
struct LossBalancer {
  double decay = 0.99;
  double floor = 1e-12;
  std::optional<double> ce;
  std::optional<double> sal;

  /// Folds in the current magnitudes; the first call initializes both EMAs.
  void update(double ce_value, double sal_value);
  void update_ce(double ce_value);
};

/// lambda * ce / m_ce + (1 - lambda) * sal / m_sal after updating the balancer
/// with the current detached magnitudes.
template <typename Scalar>
Tensor<Scalar> ule_total_loss(const Tensor<Scalar>& ce, const Tensor<Scalar>& sal, double lambda, LossBalancer& balancer);

struct TrainConfig {
  int epochs = 10;
  Index batch_size = 64;
  OptimizerConfig optimizer;
  double lambda = 0.5;
  Distance distance = Distance::mse;
  SaliencyMode mode = SaliencyMode::input;
  Scalarization scalarization = Scalarization::predicted_logit;
  double ema_decay = 0.99;
  /// ERM only: divide the cross-entropy by its EMA like the teacher objective does.
  bool balance_erm = false;
  double divergence_limit = 1e6;
  /// Stop after this many optimizer steps (0: run all epochs).
  long max_steps = 0;
  int eval_every = 10;
};

/// Called after epochs that are multiples of eval_every and after the last one.
using EpochHook = std::function<void(int epoch)>;

struct ErmTrace {
  std::vector<double> loss;  // mean cross-entropy per epoch
  long steps = 0;
};

struct UleTrace {
  std::vector<double> student_ce;
  std::vector<double> teacher_ce;
  std::vector<double> teacher_sal;
  std::vector<double> teacher_total;
  long steps = 0;
};

/// Plain cross-entropy training. Throws DivergenceError on a non-finite or exploding loss.
template <typename Scalar>
ErmTrace train_erm(Network<Scalar>& net, const GroupedDataset& train, BatchStream& stream, const TrainConfig& cfg,
                   const EpochHook& hook = {});

/// Student and teacher trained on identical batches. Per batch the student
/// takes its cross-entropy step (its saliency taken before the step), then
/// the teacher minimises the balanced combination of its cross-entropy and
/// the inverted-saliency distance to the student.
template <typename Scalar>
UleTrace train_ule(Network<Scalar>& student, Network<Scalar>& teacher, const GroupedDataset& train,
                   BatchStream& stream, const TrainConfig& cfg, const EpochHook& hook = {});

/// Image region in (row, col) pixel coordinates, all channels.
struct PatchSpec {
  Index row = 0;
  Index col = 0;
  Index rows = 1;
  Index cols = 10;
};

/// Mean over samples of sum|g| inside the patch / sum|g| over the image; g is (N, C, H, W).
/// A sample with all-zero saliency contributes 0.
template <typename Scalar>
double patch_mass_fraction(const Tensor<Scalar>& g, const PatchSpec& patch);

/// Input-mode saliency mass of `patch` averaged over the whole dataset.
template <typename Scalar>
double corner_saliency_mass(Network<Scalar>& net, const GroupedDataset& data, const PatchSpec& patch = {},
                            Index batch_size = 200, Scalarization rule = Scalarization::predicted_logit);

}  // namespace ule
