#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "fd_oracle.hpp"
#include "ule/engine.hpp"
#include "ule/metrics.hpp"
#include "ule/ops.hpp"

using namespace ule;
using ule::testing::random_tensor;
using ule::testing::TensorD;
namespace op = ule::ops;

namespace {

template <typename S>
bool same_bytes(const Tensor<S>& a, const Tensor<S>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), sizeof(S) * static_cast<std::size_t>(a.size())) == 0;
}

template <typename S>
bool same_parameters(const Network<S>& a, const Network<S>& b) {
  if (a.parameters().size() != b.parameters().size()) return false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    if (!same_bytes(a.parameters()[i].value, b.parameters()[i].value)) return false;
  }
  return true;
}

GroupedDataset synthetic(double rho, std::uint64_t seed, GroupShiftSplit split, Index n = 2000) {
  GroupShiftParams p;
  p.n = n;
  p.rho = rho;
  p.seed = seed;
  return make_synthetic_groupshift(p, split);
}

TrainConfig quick_config(int epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 64;
  cfg.optimizer.lr = 1e-2;
  return cfg;
}

Tensor<double> images(Index n, Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  typename Tensor<double>::Array a(n * c * 784);
  for (Index i = 0; i < a.size(); ++i) a(i) = unit_uniform(rng);
  return Tensor<double>({n, c, 28, 28}, std::move(a));
}

}  // namespace

TEST(NormalizeSal, Examples) {
  auto n = normalize_sal(Tensor<double>::from_vector({2}, {-2.0, 1.0}));
  EXPECT_EQ(n.to_vector(), (std::vector<double>{-1.0, 0.5}));
  auto z = normalize_sal(Tensor<double>::zeros({3, 4}));
  EXPECT_EQ(z.values().abs().maxCoeff(), 0.0);
}

TEST(NormalizeSal, OddAndPerSampleUnitMax) {
  std::mt19937_64 rng(1);
  for (int k = 0; k < 50; ++k) {
    auto g = random_tensor({4, 3, 5}, rng);
    auto n = normalize_sal(g);
    auto m = normalize_sal(op::scalar_mul(g, -1.0));
    EXPECT_TRUE(((n.values() + m.values()) == 0.0).all());
    for (Index r = 0; r < 4; ++r) EXPECT_DOUBLE_EQ(n.values().segment(r * 15, 15).abs().maxCoeff(), 1.0);
  }
}

TEST(Saliency, LinearModelGivesWeightRow) {
  auto net = build_mlp<double>(5, {}, 3);
  init_params(net, 4);
  const auto x = Tensor<double>::from_vector({1, 5}, {0.3, -1.0, 2.0, 0.5, 0.1});
  int k;
  {
    NoGradGuard ng;
    k = op::argmax_rows(net.forward(x, false).logits)[0];
  }
  const auto g = saliency(net, x, SaliencyMode::input);
  const auto& w = net.parameter("fc1.weight").value;
  EXPECT_EQ(g.shape(), (Shape{1, 5}));
  for (Index j = 0; j < 5; ++j) EXPECT_DOUBLE_EQ(g(j), w(k * 5 + j));
  EXPECT_FALSE(g.on_graph());
}

TEST(Saliency, GramOfIdentityIsIdentity) {
  auto net = build_mlp<double>(2, {}, 3);
  init_params(net, 0);
  const auto e = saliency(net, Tensor<double>::from_vector({2, 2}, {1, 0, 0, 1}), SaliencyMode::gram);
  EXPECT_EQ(e.shape(), (Shape{2, 2}));
  EXPECT_EQ(e.to_vector(), (std::vector<double>{1, 0, 0, 1}));
}

// Loop oracle: samples do not interact in the forward pass.
TEST(Saliency, BatchRowsMatchPerSampleSaliency) {
  auto net = build_poc_cnn<double>(1);
  init_params(net, 3);
  const auto x = images(3, 1, 5);
  const auto batch = saliency(net, x, SaliencyMode::input);
  for (Index i = 0; i < 3; ++i) {
    const auto one = saliency(net, op::reshape(op::select(x, i), {1, 1, 28, 28}), SaliencyMode::input);
    // Equal up to GEMM blocking order.
    const double diff = (batch.values().segment(i * 784, 784) - one.values()).abs().maxCoeff();
    EXPECT_LT(diff, 1e-12 * one.values().abs().maxCoeff()) << "sample " << i;
    EXPECT_GT(one.values().abs().maxCoeff(), 0.0);
  }
}

TEST(Saliency, ActivationModeShape) {
  auto net = build_poc_cnn<double>(1);
  init_params(net, 3);
  net.set_tap("relu3");
  const auto g = saliency(net, images(2, 1, 1), SaliencyMode::activation);
  EXPECT_EQ(g.shape(), (Shape{2, 128}));
  EXPECT_GT(g.values().abs().maxCoeff(), 0.0);
}

TEST(Saliency, RetainKeepsGraphToParameters) {
  auto net = build_mlp<double>(4, {6}, 3);
  init_params(net, 2);
  net.bind_for_training();
  const auto g = saliency(net, Tensor<double>::ones({2, 4}), SaliencyMode::input, true);
  ASSERT_TRUE(g.on_graph());
  const auto second = grad(op::sum(op::mul(g, g)), net.trainable_tensors());
  double norm = 0.0;
  for (const auto& t : second) norm += t.values().square().sum();
  EXPECT_GT(norm, 0.0);
}

TEST(Saliency, LogitSumScalarization) {
  auto net = build_mlp<double>(3, {}, 2);
  init_params(net, 1);
  const auto g = saliency(net, Tensor<double>::ones({1, 3}), SaliencyMode::input, false, Scalarization::logit_sum);
  const auto& w = net.parameter("fc1.weight").value;
  for (Index j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(g(j), w(j) + w(3 + j));
}

TEST(SalLoss, Examples) {
  const auto one = Tensor<double>::from_vector({1}, {1.0});
  EXPECT_DOUBLE_EQ(ule_sal_loss(one, one).item(), 4.0);
  std::mt19937_64 rng(2);
  const auto g = random_tensor({3, 7}, rng);
  EXPECT_EQ(ule_sal_loss(g, op::scalar_mul(g, -1.0)).item(), 0.0);
  EXPECT_EQ(ule_sal_loss(g, op::scalar_mul(g, -1.0), Distance::l1).item(), 0.0);
}

TEST(SalLoss, ScaleInvariance) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 20; ++k) {
    const auto s = random_tensor({2, 9}, rng);
    const auto t = random_tensor({2, 9}, rng);
    const double base = ule_sal_loss(s, t).item();
    const double scaled = ule_sal_loss(op::scalar_mul(s, 3.7), op::scalar_mul(t, 0.02)).item();
    EXPECT_NEAR(scaled, base, 1e-12 * std::max(1.0, base));
  }
}

TEST(SalLoss, Errors) {
  EXPECT_THROW(ule_sal_loss(Tensor<double>::ones({2, 3}), Tensor<double>::ones({3, 2})), ShapeError);
  auto linked = Tensor<double>::ones({2}).requires_grad();
  EXPECT_THROW(ule_sal_loss(linked, Tensor<double>::ones({2})), GradError);
}

TEST(SalLoss, GradientOnlyThroughTeacher) {
  std::mt19937_64 rng(4);
  const auto s = random_tensor({2, 5}, rng);
  auto t = random_tensor({2, 5}, rng).requires_grad();
  const auto g = grad(ule_sal_loss(s, t), {t});
  EXPECT_GT(g[0].values().abs().maxCoeff(), 0.0);
}

TEST(TotalLoss, FirstBatchExample) {
  LossBalancer b;
  auto total = ule_total_loss(Tensor<double>::scalar(2.0), Tensor<double>::scalar(0.02), 0.5, b);
  EXPECT_DOUBLE_EQ(total.item(), 1.0);
  EXPECT_DOUBLE_EQ(*b.ce, 2.0);
  EXPECT_DOUBLE_EQ(*b.sal, 0.02);
  ule_total_loss(Tensor<double>::scalar(1.0), Tensor<double>::scalar(0.01), 0.5, b);
  EXPECT_DOUBLE_EQ(*b.ce, 0.99 * 2.0 + 0.01 * 1.0);
}

TEST(TotalLoss, Endpoints) {
  LossBalancer b;
  b.ce = 4.0;
  b.sal = 0.5;
  b.decay = 1.0;
  auto ce = Tensor<double>::scalar(3.0).requires_grad();
  auto sal = Tensor<double>::scalar(0.7).requires_grad();
  auto g1 = grad(ule_total_loss(ce, sal, 1.0, b), {ce, sal});
  EXPECT_DOUBLE_EQ(g1[0].item(), 0.25);
  EXPECT_EQ(g1[1].item(), 0.0);
  auto g0 = grad(ule_total_loss(ce, sal, 0.0, b), {ce, sal});
  EXPECT_EQ(g0[0].item(), 0.0);
  EXPECT_DOUBLE_EQ(g0[1].item(), 2.0);
}

TEST(TotalLoss, NeutralBalancerIsRawCombination) {
  LossBalancer b;
  b.ce = 1.0;
  b.sal = 1.0;
  b.decay = 1.0;
  for (double lambda : {0.0, 0.3, 0.5, 1.0}) {
    const double got = ule_total_loss(Tensor<double>::scalar(1.7), Tensor<double>::scalar(0.4), lambda, b).item();
    EXPECT_DOUBLE_EQ(got, lambda * 1.7 + (1.0 - lambda) * 0.4);
  }
  EXPECT_THROW(ule_total_loss(Tensor<double>::scalar(1.0), Tensor<double>::scalar(1.0), 1.5, b), ArgumentError);
}

TEST(TrainErm, ZeroEpochsLeavesNetUnchanged) {
  auto train = synthetic(0.9, 0, GroupShiftSplit::train, 200);
  auto net = build_mlp<float>(4, {8}, 2);
  init_params(net, 1);
  const auto before = net;
  BatchStream stream(train.size(), 32, 0);
  auto trace = train_erm(net, train, stream, quick_config(0));
  EXPECT_TRUE(trace.loss.empty());
  EXPECT_TRUE(same_parameters(before, net));
}

TEST(TrainErm, DivergenceAborts) {
  auto train = synthetic(0.9, 0, GroupShiftSplit::train, 200);
  auto net = build_mlp<float>(4, {8}, 2);
  init_params(net, 1);
  BatchStream stream(train.size(), 32, 0);
  auto cfg = quick_config(1);
  cfg.divergence_limit = 1e-3;
  EXPECT_THROW(train_erm(net, train, stream, cfg), DivergenceError);
}

TEST(TrainErm, HookCadence) {
  auto train = synthetic(0.9, 0, GroupShiftSplit::train, 128);
  auto net = build_mlp<float>(4, {}, 2);
  init_params(net, 1);
  BatchStream stream(train.size(), 64, 0);
  auto cfg = quick_config(7);
  cfg.eval_every = 3;
  std::vector<int> seen;
  train_erm(net, train, stream, cfg, [&](int e) { seen.push_back(e); });
  EXPECT_EQ(seen, (std::vector<int>{3, 6, 7}));
}

// ERM picks up the spurious feature: high train accuracy, worst group far below average.
TEST(TrainErm, PerfectCorrelationLeavesWorstGroupBehind) {
  auto train = synthetic(1.0, 0, GroupShiftSplit::train);
  auto test = synthetic(1.0, 5, GroupShiftSplit::balanced);
  auto net = build_mlp<float>(4, {16}, 2);
  init_params(net, 0);
  BatchStream stream(train.size(), 64, 0);
  train_erm(net, train, stream, quick_config(20));
  EXPECT_GT(evaluate_predictions(predict(net, train), train).accuracy, 0.95);
  const auto m = evaluate_groups(net, test);
  EXPECT_LT(m.worst, m.average - 0.2);
}

// Oracle for the synthetic generator: at rho = 0.95 ERM is accurate in
// distribution but fails the minority groups.
TEST(TrainErm, SyntheticGroupShiftGap) {
  auto train = synthetic(0.95, 0, GroupShiftSplit::train);
  auto iid = synthetic(0.95, 7, GroupShiftSplit::train);
  auto test = synthetic(0.95, 7, GroupShiftSplit::balanced);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto net = build_mlp<float>(4, {16}, 2);
    init_params(net, seed);
    BatchStream stream(train.size(), 64, seed);
    train_erm(net, train, stream, quick_config(20));
    EXPECT_GT(evaluate_predictions(predict(net, iid), iid).accuracy, 0.85) << "seed " << seed;
    EXPECT_LT(evaluate_groups(net, test).worst, 0.60) << "seed " << seed;
  }
}

// With lambda = 1 the teacher follows the (balanced) ERM trajectory exactly.
TEST(TrainUle, LambdaOneMatchesErmTrajectory) {
  auto train = synthetic(0.9, 1, GroupShiftSplit::train, 256);
  for (long steps = 1; steps <= 3; ++steps) {
    auto cfg = quick_config(1);
    cfg.lambda = 1.0;
    cfg.max_steps = steps;
    cfg.balance_erm = true;
    auto erm = build_mlp<double>(4, {8}, 2);
    init_params(erm, 11);
    BatchStream s1(train.size(), 32, 3);
    train_erm(erm, train, s1, cfg);

    auto student = build_mlp<double>(4, {8}, 2);
    init_params(student, 12);
    auto teacher = build_mlp<double>(4, {8}, 2);
    init_params(teacher, 11);
    BatchStream s2(train.size(), 32, 3);
    train_ule(student, teacher, train, s2, cfg);
    EXPECT_TRUE(same_parameters(erm, teacher)) << "after " << steps << " steps";
  }
}

// The student never sees the teacher: its trajectory equals a standalone ERM run.
TEST(TrainUle, StudentMatchesStandaloneErm) {
  auto train = synthetic(0.9, 1, GroupShiftSplit::train, 256);
  auto cfg = quick_config(2);
  cfg.lambda = 0.3;
  auto alone = build_mlp<double>(4, {8}, 2);
  init_params(alone, 21);
  BatchStream s1(train.size(), 32, 9);
  train_erm(alone, train, s1, cfg);

  auto student = build_mlp<double>(4, {8}, 2);
  init_params(student, 21);
  auto teacher = build_mlp<double>(4, {8}, 2);
  init_params(teacher, 22);
  BatchStream s2(train.size(), 32, 9);
  train_ule(student, teacher, train, s2, cfg);
  EXPECT_TRUE(same_parameters(alone, student));
  EXPECT_FALSE(same_parameters(alone, teacher));
}

TEST(TrainUle, TeacherObjectiveDoesNotReachStudent) {
  auto student = build_mlp<double>(4, {5}, 2);
  auto teacher = build_mlp<double>(4, {5}, 2);
  init_params(student, 1);
  init_params(teacher, 2);
  student.bind_for_training();
  teacher.bind_for_training();
  const auto x = Tensor<double>::from_vector({2, 4}, {1, 2, 3, 4, -1, 0.5, 0, 2});
  const auto target = op::one_hot<double>(std::vector<int>{0, 1}, 2);
  const auto x_s = x.requires_grad();
  auto out_s = student.forward(x_s, false);
  const auto g_s = saliency_from_output<double>(out_s, x_s, SaliencyMode::input, false, Scalarization::predicted_logit);
  const auto x_t = x.requires_grad();
  auto out_t = teacher.forward(x_t, false);
  const auto g_t = saliency_from_output<double>(out_t, x_t, SaliencyMode::input, true, Scalarization::predicted_logit);
  LossBalancer b;
  auto total = ule_total_loss(op::cross_entropy(out_t.logits, target), ule_sal_loss(g_s, g_t), 0.5, b);
  for (const auto& g : grad(total, student.trainable_tensors())) EXPECT_EQ(g.values().abs().maxCoeff(), 0.0);
  double teacher_norm = 0.0;
  for (const auto& g : grad(total, teacher.trainable_tensors())) teacher_norm += g.values().square().sum();
  EXPECT_GT(teacher_norm, 0.0);
}

TEST(TrainUle, BothDistancesRunFinite) {
  auto train = synthetic(0.95, 2, GroupShiftSplit::train, 256);
  for (auto distance : {Distance::mse, Distance::l1}) {
    auto cfg = quick_config(2);
    cfg.distance = distance;
    auto student = build_mlp<float>(4, {8}, 2);
    auto teacher = build_mlp<float>(4, {8}, 2);
    init_params(student, 1);
    init_params(teacher, 2);
    BatchStream stream(train.size(), 32, 0);
    auto trace = train_ule(student, teacher, train, stream, cfg);
    ASSERT_EQ(trace.teacher_total.size(), 2u);
    for (double v : trace.teacher_total) EXPECT_TRUE(std::isfinite(v));
    for (double v : trace.teacher_sal) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(TrainUle, ActivationModeNeedsEqualTapWidths) {
  auto train = synthetic(0.95, 2, GroupShiftSplit::train, 64);
  auto student = build_mlp<float>(4, {8}, 2);
  auto teacher = build_mlp<float>(4, {6}, 2);
  init_params(student, 1);
  init_params(teacher, 2);
  BatchStream stream(train.size(), 32, 0);
  auto cfg = quick_config(1);
  cfg.mode = SaliencyMode::activation;
  EXPECT_THROW(train_ule(student, teacher, train, stream, cfg), ShapeError);
  cfg.mode = SaliencyMode::gram;
  EXPECT_NO_THROW(train_ule(student, teacher, train, stream, cfg));
}

TEST(TrainUle, ActivationModeRuns) {
  auto train = synthetic(0.95, 2, GroupShiftSplit::train, 128);
  auto student = build_mlp<double>(4, {8}, 2);
  auto teacher = build_mlp<double>(4, {8, 8}, 2);
  init_params(student, 1);
  init_params(teacher, 2);
  BatchStream stream(train.size(), 32, 0);
  auto cfg = quick_config(1);
  cfg.mode = SaliencyMode::activation;
  auto trace = train_ule(student, teacher, train, stream, cfg);
  EXPECT_TRUE(std::isfinite(trace.teacher_total[0]));
  EXPECT_GT(trace.teacher_sal[0], 0.0);
}

// Gram matrices are batch x batch whatever the tap widths.
TEST(Gram, ShapeIndependentOfTapWidth) {
  std::mt19937_64 rng(8);
  for (int k = 0; k < 20; ++k) {
    const Index width = 1 + static_cast<Index>(rng() % 40);
    const Index batch = 1 + static_cast<Index>(rng() % 6);
    auto net = build_mlp<double>(5, {width}, 3);
    init_params(net, k);
    const auto e = saliency(net, random_tensor({batch, 5}, rng), SaliencyMode::gram);
    EXPECT_EQ(e.shape(), (Shape{batch, batch}));
  }
}

TEST(PatchMass, Examples) {
  auto uniform = Tensor<double>::ones({2, 1, 28, 28});
  EXPECT_NEAR(patch_mass_fraction(uniform, PatchSpec{}), 10.0 / 784.0, 1e-15);
  EXPECT_NEAR(10.0 / 784.0, 0.01276, 1e-5);
  typename Tensor<double>::Array inside = Tensor<double>::Array::Zero(2 * 3 * 784);
  inside(5) = 2.0;
  inside(784 + 3) = -1.0;
  inside(3 * 784 + 2 * 784 + 9) = 0.5;
  EXPECT_DOUBLE_EQ(patch_mass_fraction(Tensor<double>({2, 3, 28, 28}, inside), PatchSpec{}), 1.0);
  EXPECT_EQ(patch_mass_fraction(Tensor<double>::zeros({1, 1, 28, 28}), PatchSpec{}), 0.0);
  EXPECT_THROW(patch_mass_fraction(uniform, PatchSpec{27, 0, 2, 10}), ArgumentError);
}

TEST(Names, ParseRoundTrip) {
  for (auto m : {SaliencyMode::input, SaliencyMode::activation, SaliencyMode::gram}) {
    EXPECT_EQ(parse_saliency_mode(to_string(m)), m);
  }
  for (auto d : {Distance::mse, Distance::l1}) EXPECT_EQ(parse_distance(to_string(d)), d);
  for (auto s : {Scalarization::predicted_logit, Scalarization::logit_sum, Scalarization::predicted_log_prob,
                 Scalarization::centered_logit}) {
    EXPECT_EQ(parse_scalarization(to_string(s)), s);
  }
  EXPECT_THROW(parse_distance("l2"), ArgumentError);
}
