#include "ule/engine.hpp"

#include <cmath>
#include <sstream>

#include "ule/ops.hpp"

namespace ule {

namespace op = ops;

std::string to_string(SaliencyMode mode) {
  switch (mode) {
    case SaliencyMode::input: return "input";
    case SaliencyMode::activation: return "activation";
    case SaliencyMode::gram: return "gram";
  }
  return "?";
}

std::string to_string(Scalarization rule) {
  switch (rule) {
    case Scalarization::predicted_logit: return "predicted_logit";
    case Scalarization::logit_sum: return "logit_sum";
    case Scalarization::predicted_log_prob: return "predicted_log_prob";
    case Scalarization::centered_logit: return "centered_logit";
  }
  return "?";
}

std::string to_string(Distance distance) { return distance == Distance::mse ? "mse" : "l1"; }

SaliencyMode parse_saliency_mode(const std::string& text) {
  if (text == "input") return SaliencyMode::input;
  if (text == "activation") return SaliencyMode::activation;
  if (text == "gram") return SaliencyMode::gram;
  throw ArgumentError("unknown saliency mode '" + text + "' (input|activation|gram)");
}

Scalarization parse_scalarization(const std::string& text) {
  if (text == "predicted_logit") return Scalarization::predicted_logit;
  if (text == "logit_sum") return Scalarization::logit_sum;
  if (text == "predicted_log_prob") return Scalarization::predicted_log_prob;
  if (text == "centered_logit") return Scalarization::centered_logit;
  throw ArgumentError("unknown scalarization '" + text +
                      "' (predicted_logit|logit_sum|predicted_log_prob|centered_logit)");
}

Distance parse_distance(const std::string& text) {
  if (text == "mse") return Distance::mse;
  if (text == "l1") return Distance::l1;
  throw ArgumentError("unknown distance '" + text + "' (mse|l1)");
}

template <typename Scalar>
Tensor<Scalar> normalize_sal(const Tensor<Scalar>& z) {
  const Index rows = z.rank() >= 2 ? z.extent(0) : 1;
  const Index cols = rows > 0 ? z.size() / rows : 0;
  const auto flat = op::reshape(z, {rows, cols});
  const auto n = op::divide_rows(flat, op::max_abs_rows(flat, static_cast<Scalar>(1e-12)));
  return op::reshape(n, z.shape());
}

template <typename Scalar>
Tensor<Scalar> scalarize(const Tensor<Scalar>& logits, Scalarization rule) {
  if (rule == Scalarization::logit_sum) return op::sum(logits);
  const Index rows = logits.extent(0), classes = logits.extent(1);
  const auto picked = op::one_hot<Scalar>(op::argmax_rows(logits), classes);
  switch (rule) {
    case Scalarization::predicted_log_prob:
      return op::scalar_mul(op::cross_entropy(logits, picked), static_cast<Scalar>(-rows));
    case Scalarization::centered_logit: {
      const Tensor<Scalar> weights(picked.shape(), picked.values() - Scalar(1) / static_cast<Scalar>(classes));
      return op::sum(op::mul(logits, weights));
    }
    default:
      return op::sum(op::mul(logits, picked));
  }
}

template <typename Scalar>
Tensor<Scalar> saliency_from_output(const typename Network<Scalar>::Output& out, const Tensor<Scalar>& x,
                                    SaliencyMode mode, bool retain, Scalarization rule) {
  if (mode == SaliencyMode::gram) {
    auto e = op::matmul(out.tap, op::transpose(out.tap));
    return retain ? e : e.detach();
  }
  const Tensor<Scalar>& wrt = mode == SaliencyMode::input ? x : out.tap;
  if (!wrt.on_graph()) {
    throw GradError(std::string("saliency: the ") + (mode == SaliencyMode::input ? "input" : "tap activation") +
                    " is not graph-linked");
  }
  return grad(scalarize(out.logits, rule), {wrt}, retain)[0];
}

template <typename Scalar>
Tensor<Scalar> saliency(Network<Scalar>& net, const Tensor<Scalar>& x, SaliencyMode mode, bool retain,
                        Scalarization rule) {
  if (mode == SaliencyMode::gram && !retain) {
    NoGradGuard no_grad;
    auto out = net.forward(x, false);
    return op::matmul(out.tap, op::transpose(out.tap));
  }
  GradModeGuard on(true);
  const Tensor<Scalar> input = mode == SaliencyMode::input ? x.detach().requires_grad() : x.detach();
  typename Network<Scalar>::ForwardOptions options;
  options.train = false;
  options.tap_leaf = mode == SaliencyMode::activation;
  auto out = net.forward(input, options);
  return saliency_from_output<Scalar>(out, input, mode, retain, rule);
}

template <typename Scalar>
Tensor<Scalar> ule_sal_loss(const Tensor<Scalar>& g_s, const Tensor<Scalar>& g_t, Distance distance) {
  if (g_s.shape() != g_t.shape()) {
    throw ShapeError("ule_sal_loss: student saliency " + shape_str(g_s.shape()) + " vs teacher saliency " +
                     shape_str(g_t.shape()));
  }
  if (g_s.on_graph()) throw GradError("ule_sal_loss: the student saliency must be detached");
  const auto target = normalize_sal(op::scalar_mul(g_s, Scalar(-1)));
  const auto mine = normalize_sal(g_t);
  return distance == Distance::mse ? op::mse(target, mine) : op::l1(target, mine);
}

void LossBalancer::update(double ce_value, double sal_value) {
  update_ce(ce_value);
  const double s = std::max(std::abs(sal_value), floor);
  sal = sal ? decay * *sal + (1.0 - decay) * s : s;
}

void LossBalancer::update_ce(double ce_value) {
  const double c = std::max(std::abs(ce_value), floor);
  ce = ce ? decay * *ce + (1.0 - decay) * c : c;
}

template <typename Scalar>
Tensor<Scalar> ule_total_loss(const Tensor<Scalar>& ce, const Tensor<Scalar>& sal, double lambda,
                              LossBalancer& balancer) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ArgumentError("ule_total_loss: lambda must lie in [0, 1]");
  balancer.update(static_cast<double>(ce.item()), static_cast<double>(sal.item()));
  return op::add(op::scalar_mul(ce, static_cast<Scalar>(lambda / *balancer.ce)),
                 op::scalar_mul(sal, static_cast<Scalar>((1.0 - lambda) / *balancer.sal)));
}

namespace {

void check_loss(double value, double limit, const char* what, int epoch, long step) {
  if (!std::isfinite(value) || value > limit) {
    std::ostringstream os;
    os << what << " diverged at epoch " << epoch << ", step " << step << " (loss " << value << ", limit " << limit
       << ")";
    throw DivergenceError(os.str());
  }
}

bool wants_eval(const TrainConfig& cfg, int epoch) {
  return epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
}

void check_config(const TrainConfig& cfg) {
  if (cfg.epochs < 0) throw ArgumentError("train: epochs must be non-negative");
  if (cfg.batch_size <= 0) throw ArgumentError("train: batch size must be positive");
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0)) throw ArgumentError("train: lambda must lie in [0, 1]");
  if (!(cfg.optimizer.lr > 0.0)) throw ArgumentError("train: learning rate must be positive");
}

// Runs `body` and turns numerical blow-ups inside the step into a divergence diagnostic.
template <typename F>
void guarded(F&& body, const char* what, int epoch, long step) {
  try {
    body();
  } catch (const NonFiniteError& e) {
    std::ostringstream os;
    os << what << " diverged at epoch " << epoch << ", step " << step << ": " << e.what();
    throw DivergenceError(os.str());
  }
}

}  // namespace

template <typename Scalar>
ErmTrace train_erm(Network<Scalar>& net, const GroupedDataset& train, BatchStream& stream, const TrainConfig& cfg,
                   const EpochHook& hook) {
  check_config(cfg);
  Optimizer<Scalar> opt(cfg.optimizer);
  LossBalancer balancer;
  balancer.decay = cfg.ema_decay;
  ErmTrace trace;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double total = 0.0;
    Index batches = 0;
    for (const auto& idx : stream.next_epoch()) {
      if (cfg.max_steps > 0 && trace.steps >= cfg.max_steps) break;
      guarded(
          [&] {
            const auto x = train.batch_inputs<Scalar>(idx);
            const auto target = op::one_hot<Scalar>(train.batch_labels(idx), net.num_classes());
            net.bind_for_training();
            auto out = net.forward(x, true);
            auto ce = op::cross_entropy(out.logits, target);
            const double value = static_cast<double>(ce.item());
            check_loss(value, cfg.divergence_limit, "erm", epoch, trace.steps);
            auto loss = ce;
            if (cfg.balance_erm) {
              balancer.update_ce(value);
              loss = op::scalar_mul(ce, static_cast<Scalar>(1.0 / *balancer.ce));
            }
            opt.step(net, name_grads(net, grad(loss, net.trainable_tensors())));
            net.release_graph();
            total += value;
          },
          "erm", epoch, trace.steps);
      ++batches;
      ++trace.steps;
    }
    net.release_graph();
    trace.loss.push_back(batches ? total / static_cast<double>(batches) : 0.0);
    if (hook && wants_eval(cfg, epoch)) hook(epoch);
    if (cfg.max_steps > 0 && trace.steps >= cfg.max_steps) break;
  }
  return trace;
}

template <typename Scalar>
UleTrace train_ule(Network<Scalar>& student, Network<Scalar>& teacher, const GroupedDataset& train,
                   BatchStream& stream, const TrainConfig& cfg, const EpochHook& hook) {
  check_config(cfg);
  if (student.input_shape() != teacher.input_shape()) {
    throw ShapeError("train_ule: student input " + shape_str(student.input_shape()) + " differs from teacher input " +
                     shape_str(teacher.input_shape()));
  }
  if (cfg.mode == SaliencyMode::activation && student.tap_width() != teacher.tap_width()) {
    throw ShapeError("train_ule: activation mode needs equal tap widths (student " +
                     std::to_string(student.tap_width()) + ", teacher " + std::to_string(teacher.tap_width()) +
                     "); use gram mode for mismatched architectures");
  }
  Optimizer<Scalar> student_opt(cfg.optimizer);
  Optimizer<Scalar> teacher_opt(cfg.optimizer);
  LossBalancer balancer;
  balancer.decay = cfg.ema_decay;
  const bool input_mode = cfg.mode == SaliencyMode::input;
  typename Network<Scalar>::ForwardOptions options;
  options.train = true;
  options.tap_leaf = cfg.mode == SaliencyMode::activation;

  // Gram matrices are compared as one flattened row per batch.
  auto comparable = [&](const Tensor<Scalar>& g) {
    return cfg.mode == SaliencyMode::gram ? op::reshape(g, {1, g.size()}) : g;
  };

  UleTrace trace;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double s_ce = 0.0, t_ce = 0.0, t_sal = 0.0, t_total = 0.0;
    Index batches = 0;
    for (const auto& idx : stream.next_epoch()) {
      if (cfg.max_steps > 0 && trace.steps >= cfg.max_steps) break;
      guarded(
          [&] {
            const auto x = train.batch_inputs<Scalar>(idx);
            const auto target = op::one_hot<Scalar>(train.batch_labels(idx), teacher.num_classes());

            // Student: saliency from the pre-update network, then its own cross-entropy step.
            student.bind_for_training();
            const auto x_s = input_mode ? x.requires_grad() : x;
            auto out_s = student.forward(x_s, options);
            auto ce_s = op::cross_entropy(out_s.logits, target);
            check_loss(static_cast<double>(ce_s.item()), cfg.divergence_limit, "student", epoch, trace.steps);
            const auto g_s = saliency_from_output<Scalar>(out_s, x_s, cfg.mode, false, cfg.scalarization).detach();
            student_opt.step(student, name_grads(student, grad(ce_s, student.trainable_tensors())));
            student.release_graph();

            // Teacher: cross-entropy plus inverted-saliency term, differentiated through g_t.
            teacher.bind_for_training();
            const auto x_t = input_mode ? x.requires_grad() : x;
            auto out_t = teacher.forward(x_t, options);
            auto ce_t = op::cross_entropy(out_t.logits, target);
            const auto g_t = saliency_from_output<Scalar>(out_t, x_t, cfg.mode, true, cfg.scalarization);
            auto sal = ule_sal_loss(comparable(g_s), comparable(g_t), cfg.distance);
            auto total = ule_total_loss(ce_t, sal, cfg.lambda, balancer);
            check_loss(static_cast<double>(total.item()), cfg.divergence_limit, "teacher", epoch, trace.steps);
            teacher_opt.step(teacher, name_grads(teacher, grad(total, teacher.trainable_tensors())));
            teacher.release_graph();

            s_ce += static_cast<double>(ce_s.item());
            t_ce += static_cast<double>(ce_t.item());
            t_sal += static_cast<double>(sal.item());
            t_total += static_cast<double>(total.item());
          },
          "ule", epoch, trace.steps);
      ++batches;
      ++trace.steps;
    }
    student.release_graph();
    teacher.release_graph();
    const double n = batches ? static_cast<double>(batches) : 1.0;
    trace.student_ce.push_back(s_ce / n);
    trace.teacher_ce.push_back(t_ce / n);
    trace.teacher_sal.push_back(t_sal / n);
    trace.teacher_total.push_back(t_total / n);
    if (hook && wants_eval(cfg, epoch)) hook(epoch);
    if (cfg.max_steps > 0 && trace.steps >= cfg.max_steps) break;
  }
  return trace;
}

template <typename Scalar>
double patch_mass_fraction(const Tensor<Scalar>& g, const PatchSpec& patch) {
  if (g.rank() != 4) throw ShapeError("patch_mass_fraction: expected (N,C,H,W) saliency, got " + shape_str(g.shape()));
  const Index n = g.extent(0), c = g.extent(1), h = g.extent(2), w = g.extent(3);
  if (patch.row < 0 || patch.col < 0 || patch.rows <= 0 || patch.cols <= 0 || patch.row + patch.rows > h ||
      patch.col + patch.cols > w) {
    throw ArgumentError("patch_mass_fraction: patch outside the " + std::to_string(h) + "x" + std::to_string(w) +
                        " image");
  }
  if (n == 0) return 0.0;
  const Scalar* data = g.data();
  double sum = 0.0;
  for (Index i = 0; i < n; ++i) {
    double all = 0.0, inside = 0.0;
    for (Index ch = 0; ch < c; ++ch) {
      const Scalar* plane = data + (i * c + ch) * h * w;
      for (Index p = 0; p < h * w; ++p) all += std::abs(static_cast<double>(plane[p]));
      for (Index r = patch.row; r < patch.row + patch.rows; ++r) {
        for (Index q = patch.col; q < patch.col + patch.cols; ++q) inside += std::abs(static_cast<double>(plane[r * w + q]));
      }
    }
    sum += all > 0.0 ? inside / all : 0.0;
  }
  return sum / static_cast<double>(n);
}

template <typename Scalar>
double corner_saliency_mass(Network<Scalar>& net, const GroupedDataset& data, const PatchSpec& patch,
                            Index batch_size, Scalarization rule) {
  if (data.size() == 0) return 0.0;
  double weighted = 0.0;
  for (Index start = 0; start < data.size(); start += batch_size) {
    std::vector<Index> idx;
    for (Index i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const auto g = saliency(net, data.batch_inputs<Scalar>(idx), SaliencyMode::input, false, rule);
    weighted += patch_mass_fraction(g, patch) * static_cast<double>(idx.size());
  }
  return weighted / static_cast<double>(data.size());
}

#define ULE_INSTANTIATE_ENGINE(S)                                                                             \
  template Tensor<S> normalize_sal(const Tensor<S>&);                                                         \
  template Tensor<S> scalarize(const Tensor<S>&, Scalarization);                                              \
  template Tensor<S> saliency_from_output<S>(const Network<S>::Output&, const Tensor<S>&, SaliencyMode, bool, \
                                             Scalarization);                                                  \
  template Tensor<S> saliency(Network<S>&, const Tensor<S>&, SaliencyMode, bool, Scalarization);              \
  template Tensor<S> ule_sal_loss(const Tensor<S>&, const Tensor<S>&, Distance);                              \
  template Tensor<S> ule_total_loss(const Tensor<S>&, const Tensor<S>&, double, LossBalancer&);               \
  template ErmTrace train_erm(Network<S>&, const GroupedDataset&, BatchStream&, const TrainConfig&,           \
                              const EpochHook&);                                                              \
  template UleTrace train_ule(Network<S>&, Network<S>&, const GroupedDataset&, BatchStream&, const TrainConfig&, \
                              const EpochHook&);                                                              \
  template double patch_mass_fraction(const Tensor<S>&, const PatchSpec&);                                    \
  template double corner_saliency_mass(Network<S>&, const GroupedDataset&, const PatchSpec&, Index, Scalarization);

ULE_INSTANTIATE_ENGINE(float)
ULE_INSTANTIATE_ENGINE(double)

}  // namespace ule
