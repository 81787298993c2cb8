#include <gtest/gtest.h>

#include <cmath>

#include "gradleak/attack.hpp"
#include "gradleak/cnn3.hpp"
#include "gradleak/synthetic.hpp"
#include "oracles.hpp"

using namespace gradleak;
using namespace gradleak::attack;

namespace {

// Small network in which every stacked system has full column rank.
config::ModelConfig small_full_rank(net::Activation a1 = net::Activation::tanh(),
                                    net::Activation a2 = net::Activation::tanh(), std::uint64_t seed = 0) {
  config::ModelConfig cfg;
  cfg.input = {3, 10, 10};
  cfg.stages = {{3, 6, 1, a1}, {3, 9, 1, a2}};
  cfg.seed = seed;
  return cfg;
}

TensorMap small_image(std::uint64_t seed) {
  return TensorMap(Shape3{3, 10, 10}, oracle::random_vector(300, seed, 0.05, 0.95));
}

}  // namespace

TEST(ReconstructFcInput, ExactOverRandomTrials) {
  std::mt19937_64 gen(1);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 588;
    const auto x = oracle::random_vector(n, 1000 + trial);
    const auto w = oracle::random_matrix(10, n, 2000 + trial);
    const auto b = oracle::random_vector(10, 3000 + trial);
    const std::size_t label = gen() % 10;
    // dJ/dz = softmax(Wx + b) - onehot
    auto z = oracle::matvec(w, x);
    double mx = -1e300, s = 0;
    for (std::size_t k = 0; k < 10; ++k) mx = std::max(mx, z[k] += b[k]);
    for (double& v : z) s += (v = std::exp(v - mx));
    Vector gz(10);
    for (std::size_t k = 0; k < 10; ++k) gz[k] = z[k] / s - (k == label ? 1.0 : 0.0);
    linop::DenseMatrix gw(10, n);
    for (std::size_t k = 0; k < 10; ++k)
      for (std::size_t l = 0; l < n; ++l) gw(k, l) = gz[k] * x[l];
    worst = std::max(worst, oracle::rel_diff(reconstruct_fc_input(gw, gz), x));
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(ReconstructFcInput, VanishedGradientIsReported) {
  linop::DenseMatrix gw(3, 4);
  EXPECT_THROW(reconstruct_fc_input(gw, Vector(3, 0.0)), NumericalError);
  EXPECT_THROW(reconstruct_fc_input(gw, Vector(2, 1.0)), std::invalid_argument);
}

TEST(InferLabel, SigmoidFeaturesAllLabels) {
  const auto cfg = cnn3::model(1, cnn3::ActivationSuite::LeakySigmoid, 3);
  const auto spec = cfg.spec();
  const auto w = cfg.weights();
  const auto x = synthetic::synthetic_image(11);
  for (std::size_t label = 0; label < 10; ++label) {
    const auto r = net::loss_and_gradients(spec, w, x, label);
    EXPECT_EQ(infer_label(r.grads.fc_weight_grad, r.grads.fc_bias_grad), label);
  }
}

TEST(InferLabel, FallsBackToBiasSign) {
  // Zero weight gradient carries no sign pattern; the bias decides.
  linop::DenseMatrix gw(4, 3);
  EXPECT_EQ(infer_label(gw, Vector{0.1, 0.2, -0.6, 0.3}), 2u);
}

TEST(InferLabel, AmbiguousGradientsThrow) {
  linop::DenseMatrix gw(4, 3);
  EXPECT_THROW(infer_label(gw, Vector{0.1, 0.2, 0.6, 0.3}), NumericalError);
  EXPECT_THROW(infer_label(gw, Vector{-0.1, 0.2, -0.6, 0.3}), NumericalError);
}

TEST(PropagateGrads, MatchesBackpropWithTrueActivations) {
  const auto cfg = cnn3::model(2, cnn3::ActivationSuite::Tanh, 4);
  const auto spec = cfg.spec();
  const auto w = cfg.weights();
  const auto r = net::loss_and_gradients(spec, w, synthetic::synthetic_image(4), 2);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& layer = spec.conv_layers[i];
    const auto pg = propagate_grads(w.kernels[i], layer.geometry, layer.activation, r.backward.grad_input[i + 1],
                                    r.trace.layers[i].pre_activation);
    EXPECT_LT(oracle::rel_diff(pg.grad_z, r.backward.grad_pre_activation[i]), 1e-14);
    EXPECT_LT(oracle::rel_diff(pg.grad_x, r.backward.grad_input[i]), 1e-14);
  }
}

TEST(BuildConvSystem, TrueInputSatisfiesBothConstraints) {
  const auto cfg = small_full_rank();
  const auto spec = cfg.spec();
  const auto w = cfg.weights();
  const auto r = net::loss_and_gradients(spec, w, small_image(1), 3);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& g = spec.conv_layers[i].geometry;
    auto sys = build_conv_system(i + 1, g, w.kernels[i], r.trace.layers[i].pre_activation,
                                 r.grads.kernel_grads[i].values, r.backward.grad_pre_activation[i]);
    EXPECT_EQ(sys.u.rows(), g.output_size() + g.kernel_entries());
    EXPECT_EQ(sys.u.cols(), g.input_size());
    EXPECT_EQ(sys.weight_rows, g.output_size());
    const auto ux = sys.u.multiply(r.trace.layers[i].input);
    EXPECT_LT(oracle::rel_diff(ux, sys.v), 1e-12);
    EXPECT_EQ(sys.compute_rank(), g.input_size());
  }
}

TEST(BuildConvSystem, RejectsWrongLengths) {
  const linop::ConvGeometry g{6, 6, 1, 3, 2, 1};
  const auto k = linop::Kernel::zeros(g);
  EXPECT_THROW(build_conv_system(1, g, k, Vector(5), Vector(g.kernel_entries()), Vector(g.output_size())),
               std::invalid_argument);
  EXPECT_THROW(build_conv_system(1, g, k, Vector(g.output_size()), Vector(3), Vector(g.output_size())),
               std::invalid_argument);
}

TEST(Pullback, ProjectorIsSymmetricIdempotentAndKillsRange) {
  const auto cfg = small_full_rank();
  const auto spec = cfg.spec();
  const auto w = cfg.weights();
  const auto w1 = linop::weight_circulant(w.kernels[0], spec.conv_layers[0].geometry);
  const auto pb = pullback_operator(w1, spec.conv_layers[0].activation);
  ASSERT_TRUE(pb.defined());
  const auto p = pb.projector();
  const auto p2 = p.multiply(p);
  double idem = 0, sym = 0;
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (std::size_t j = 0; j < p.cols(); ++j) {
      idem = std::max(idem, std::abs(p2(i, j) - p(i, j)));
      sym = std::max(sym, std::abs(p(i, j) - p(j, i)));
    }
  EXPECT_LT(idem, 1e-10);
  EXPECT_LT(sym, 1e-12);
  // Trace equals the co-dimension m - n.
  double tr = 0;
  for (std::size_t i = 0; i < p.rows(); ++i) tr += p(i, i);
  EXPECT_NEAR(tr, static_cast<double>(w1.rows() - w1.cols()), 1e-9);

  const auto z = w1.multiply(small_image(2).values);
  EXPECT_LT(oracle::norm(pb.apply(z)), 1e-10 * oracle::norm(z));
  const auto y = oracle::random_vector(w1.rows(), 5);
  EXPECT_LT(oracle::rel_diff(pb.apply(y), p.multiply(y)), 1e-12);
}

TEST(Pullback, UndefinedForWideOrDeficientOperators) {
  const linop::ConvGeometry strided{10, 10, 3, 4, 3, 2};  // 48 x 300
  linop::Kernel k = linop::Kernel::zeros(strided);
  k.values = oracle::random_vector(k.values.size(), 3);
  EXPECT_FALSE(pullback_operator(linop::weight_circulant(k, strided)).defined());
  // Tall but rank-deficient: two identical columns.
  auto tall = linop::DenseMatrix::from_rows({{1, 1, 0}, {2, 2, 1}, {0, 0, 3}, {1, 1, 1}});
  EXPECT_FALSE(pullback_operator(tall).defined());
  EXPECT_THROW(PullbackOperator().apply(Vector(3)), std::logic_error);
}

TEST(SolveConvLayer, LinearModeRecoversFullRankInput) {
  const auto cfg = small_full_rank();
  const auto spec = cfg.spec();
  const auto w = cfg.weights();
  const auto x0 = small_image(3);
  const auto r = net::loss_and_gradients(spec, w, x0, 1);
  const auto& g = spec.conv_layers[0].geometry;
  const auto sys = build_conv_system(1, g, w.kernels[0], r.trace.layers[0].pre_activation,
                                     r.grads.kernel_grads[0].values, r.backward.grad_pre_activation[0]);
  const auto sol = solve_conv_layer(sys, std::nullopt, nullptr, SolverOptions{});
  EXPECT_EQ(sol.mode, SolveMode::LinearLstsq);
  EXPECT_LT(oracle::rel_diff(sol.x, x0.values), 1e-10);
}

TEST(SolveConvLayer, ReparamTraceIsMonotone) {
  // Rank-deficient layer 2 of variant 2: the solver must still decrease.
  const auto cfg = cnn3::model(2, cnn3::ActivationSuite::Tanh, 0);
  const auto spec = cfg.spec();
  const auto w = cfg.weights();
  const auto r = net::loss_and_gradients(spec, w, synthetic::synthetic_image(1), 4);
  const auto& g = spec.conv_layers[1].geometry;
  const auto sys = build_conv_system(2, g, w.kernels[1], r.trace.layers[1].pre_activation,
                                     r.grads.kernel_grads[1].values, r.backward.grad_pre_activation[1]);
  for (auto method : {DescentMethod::Lbfgs, DescentMethod::Gradient}) {
    SolverOptions opts;
    opts.method = method;
    opts.max_iters = 300;
    const auto sol = solve_conv_layer(sys, spec.conv_layers[0].activation, nullptr, opts);
    EXPECT_EQ(sol.mode, SolveMode::Reparam);
    ASSERT_FALSE(sol.objective_history.empty());
    for (std::size_t i = 1; i < sol.objective_history.size(); ++i)
      EXPECT_LE(sol.objective_history[i], sol.objective_history[i - 1]);
    EXPECT_LE(sol.objective_history.back(), sol.objective_history.front());
    EXPECT_TRUE(std::isfinite(sol.residual_norm));
  }
}

TEST(SolveConvLayer, PullbackModeRecoversPreActivation) {
  const auto cfg = small_full_rank();
  const auto spec = cfg.spec();
  const auto w = cfg.weights();
  const auto r = net::loss_and_gradients(spec, w, small_image(4), 5);
  const auto& g = spec.conv_layers[1].geometry;
  const auto sys = build_conv_system(2, g, w.kernels[1], r.trace.layers[1].pre_activation,
                                     r.grads.kernel_grads[1].values, r.backward.grad_pre_activation[1]);
  const auto pb = pullback_operator(linop::weight_circulant(w.kernels[0], spec.conv_layers[0].geometry));
  const auto sol = solve_conv_layer(sys, spec.conv_layers[0].activation, &pb, SolverOptions{});
  EXPECT_EQ(sol.mode, SolveMode::ReparamPullback);
  EXPECT_LT(oracle::rel_diff(sol.x, r.trace.layers[0].pre_activation), 1e-8);
}

TEST(SolveConvLayer, RejectsMismatchedPullback) {
  ConvSystem sys;
  sys.u = linop::DenseMatrix::identity(4);
  sys.v = Vector(4, 0.1);
  const auto pb = pullback_operator(linop::DenseMatrix::from_rows({{1}, {1}, {0}}));
  ASSERT_TRUE(pb.defined());
  EXPECT_THROW(solve_conv_layer(sys, net::Activation::tanh(), &pb, SolverOptions{}), std::invalid_argument);
}

TEST(CopaAttack, ExactOnFullRankNetwork) {
  for (auto [a1, a2] : {std::pair{net::Activation::tanh(), net::Activation::tanh()},
                        std::pair{net::Activation::leaky_relu(), net::Activation::sigmoid()}}) {
    const auto cfg = small_full_rank(a1, a2, 8);
    const auto spec = cfg.spec();
    const auto w = cfg.weights();
    const auto x0 = small_image(6);
    const auto r = net::loss_and_gradients(spec, w, x0, 7);
    const auto res = copa_attack(spec, w, r.grads, std::nullopt, SolverOptions{});
    EXPECT_EQ(res.label, 7u);
    EXPECT_TRUE(res.label_inferred);
    EXPECT_LT(oracle::rel_diff(res.image.values, x0.values), 1e-8);
    ASSERT_EQ(res.layers.size(), 3u);
    EXPECT_EQ(res.layers[0].mode, SolveMode::FcExact);
    EXPECT_EQ(res.layers[1].mode, SolveMode::ReparamPullback);
    EXPECT_EQ(res.layers[2].mode, SolveMode::LinearLstsq);
    EXPECT_EQ(res.layers[1].rank, std::optional<std::size_t>(384));
  }
}

TEST(CopaAttack, ListingRuleSkipsPullback) {
  const auto cfg = small_full_rank();
  const auto r = net::loss_and_gradients(cfg.spec(), cfg.weights(), small_image(7), 0);
  SolverOptions opts;
  opts.pullback_rule = PullbackRule::AlgorithmListing;
  const auto res = copa_attack(cfg.spec(), cfg.weights(), r.grads, std::nullopt, opts);
  EXPECT_EQ(res.layers[1].mode, SolveMode::Reparam);
}

TEST(CopaAttack, LabelOverrideIsUsed) {
  const auto cfg = small_full_rank();
  auto r = net::loss_and_gradients(cfg.spec(), cfg.weights(), small_image(8), 2);
  const auto res = copa_attack(cfg.spec(), cfg.weights(), r.grads, 2, SolverOptions{});
  EXPECT_FALSE(res.label_inferred);
  EXPECT_EQ(res.label, 2u);
  EXPECT_THROW(copa_attack(cfg.spec(), cfg.weights(), r.grads, 10, SolverOptions{}), std::invalid_argument);
  // Zero gradients cannot be inverted; the failure names the stage.
  std::fill(r.grads.fc_bias_grad.begin(), r.grads.fc_bias_grad.end(), 0.0);
  EXPECT_THROW(copa_attack(cfg.spec(), cfg.weights(), r.grads, 2, SolverOptions{}), NumericalError);
}
