#pragma once

// Layer-by-layer reconstruction of a training image from weight gradients.
//
// The fully-connected input is read off the weight/bias gradients in closed
// form. Each convolutional layer, deepest first, is then posed as the stacked
// linear system
//
//   U = [ weight circulant W ; gradient circulant G(dJ/dZ) ],
//   V = [ A^-1(X_next)       ; vec(dJ/dKernel)          ],
//
// and solved either directly (first layer) or through the previous layer's
// activation, optionally with the pull-back penalty ||P z||^2 where P projects
// onto the orthogonal complement of the previous weight operator's range.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradleak/error.hpp"
#include "gradleak/linop.hpp"
#include "gradleak/net.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak::attack {

using linop::ConvGeometry;
using linop::DenseMatrix;
using linop::Kernel;
using linop::SparseRows;
using net::Activation;

inline constexpr double kVanishedGradient = 1e-12;

// Returns the class whose FC weight-gradient row has the opposite sign
// pattern to every other row. Falls back to the single negative bias-gradient
// entry. Throws when neither identifies a unique class.
inline std::size_t infer_label(const DenseMatrix& grad_w_fc, std::span<const double> grad_b_fc) {
  const std::size_t classes = grad_w_fc.rows();
  if (grad_b_fc.size() != classes) throw std::invalid_argument("infer_label: bias gradient length mismatch");

  auto sign = [](double v) { return v > 0.0 ? 1 : (v < 0.0 ? -1 : 0); };
  auto same_pattern = [&](std::size_t a, std::size_t b) {
    const auto ra = grad_w_fc.row(a);
    const auto rb = grad_w_fc.row(b);
    for (std::size_t l = 0; l < ra.size(); ++l)
      if (sign(ra[l]) != sign(rb[l])) return false;
    return true;
  };
  auto nonzero_row = [&](std::size_t k) {
    const auto r = grad_w_fc.row(k);
    return std::any_of(r.begin(), r.end(), [](double v) { return v != 0.0; });
  };

  if (classes >= 3 && grad_w_fc.cols() > 0) {
    std::vector<std::size_t> candidates;
    for (std::size_t k = 0; k < classes; ++k) {
      if (!nonzero_row(k)) continue;
      bool differs_from_all = true;
      for (std::size_t j = 0; j < classes && differs_from_all; ++j) {
        if (j != k && same_pattern(k, j)) differs_from_all = false;
      }
      if (!differs_from_all) continue;
      // Every other row must share one common pattern.
      const std::size_t ref = k == 0 ? 1 : 0;
      bool others_agree = nonzero_row(ref);
      for (std::size_t j = 0; j < classes && others_agree; ++j) {
        if (j != k && j != ref && !same_pattern(j, ref)) others_agree = false;
      }
      if (others_agree) candidates.push_back(k);
    }
    if (candidates.size() == 1) return candidates.front();
  }

  std::optional<std::size_t> negative;
  for (std::size_t k = 0; k < classes; ++k) {
    if (grad_b_fc[k] < 0.0) {
      if (negative) {
        negative.reset();
        break;
      }
      negative = k;
    }
  }
  if (negative) {
    bool unique = true;
    for (std::size_t k = 0; k < classes; ++k)
      if (k != *negative && grad_b_fc[k] < 0.0) unique = false;
    if (unique) return *negative;
  }
  throw NumericalError(
      "infer_label: gradient signs do not single out one class; supply the label explicitly");
}

// Closed-form FC input from the rank-one structure dJ/dW = dJ/dz x^T.
// grad_z is dJ/dz of the FC layer (equal to the bias gradient).
inline Vector reconstruct_fc_input(const DenseMatrix& grad_w, std::span<const double> grad_z) {
  if (grad_z.size() != grad_w.rows()) throw std::invalid_argument("reconstruct_fc_input: length mismatch");
  std::size_t best = 0;
  for (std::size_t k = 1; k < grad_z.size(); ++k)
    if (std::abs(grad_z[k]) > std::abs(grad_z[best])) best = k;
  if (grad_z.empty() || !(std::abs(grad_z[best]) > kVanishedGradient)) {
    throw NumericalError("reconstruct_fc_input: output gradient vanished, the input is not identifiable");
  }
  const auto row = grad_w.row(best);
  Vector x(row.size());
  for (std::size_t l = 0; l < x.size(); ++l) x[l] = row[l] / grad_z[best];
  return x;
}

struct PropagatedGrads {
  Vector grad_z;  // dJ/dZ of this layer
  Vector grad_x;  // dJ/dX of this layer's input
};

// grad_z = grad_x_next * A'(z), grad_x = W^T grad_z, with the activation
// derivative taken at the attacker's estimate of Z.
inline PropagatedGrads propagate_grads(const Kernel& kernel, const ConvGeometry& geom, const Activation& activation,
                                       std::span<const double> grad_x_next, std::span<const double> z_reconstructed) {
  if (grad_x_next.size() != geom.output_size() || z_reconstructed.size() != geom.output_size()) {
    throw std::invalid_argument("propagate_grads: expected vectors of length " +
                                std::to_string(geom.output_size()));
  }
  PropagatedGrads out;
  const Vector da = net::activation_derivative(activation, z_reconstructed);
  out.grad_z.resize(da.size());
  for (std::size_t p = 0; p < da.size(); ++p) out.grad_z[p] = grad_x_next[p] * da[p];
  out.grad_x = net::conv_input_gradient(kernel, geom, out.grad_z);
  return out;
}

struct ConvSystem {
  DenseMatrix u;
  Vector v;
  std::size_t layer_index = 0;  // 1-based conv layer index
  std::size_t input_dim = 0;
  std::size_t weight_rows = 0;  // rows of U belonging to the weight block
  std::optional<std::size_t> rank;

  std::size_t compute_rank(double rel_tolerance = linop::kDefaultRankTolerance) {
    if (!rank) rank = linop::numerical_rank(u, rel_tolerance);
    return *rank;
  }
};

inline ConvSystem build_conv_system(std::size_t layer_index, const ConvGeometry& geom, const Kernel& kernel,
                                    std::span<const double> z_target, std::span<const double> grad_kernel,
                                    std::span<const double> grad_z) {
  if (z_target.size() != geom.output_size()) {
    throw std::invalid_argument("build_conv_system: z_target length " + std::to_string(z_target.size()) +
                                " != " + std::to_string(geom.output_size()));
  }
  if (grad_kernel.size() != geom.kernel_entries()) {
    throw std::invalid_argument("build_conv_system: kernel gradient length " + std::to_string(grad_kernel.size()) +
                                " != " + std::to_string(geom.kernel_entries()));
  }
  ConvSystem sys;
  sys.layer_index = layer_index;
  sys.input_dim = geom.input_size();
  sys.weight_rows = geom.output_size();
  sys.u = DenseMatrix::vstack(linop::weight_circulant(kernel, geom), linop::gradient_circulant(grad_z, geom));
  sys.v.assign(z_target.begin(), z_target.end());
  sys.v.insert(sys.v.end(), grad_kernel.begin(), grad_kernel.end());
  return sys;
}

// P = I - Q Q^T with Q an orthonormal basis of range(W_prev); equal to
// R diag(0, I_{m-n}) R^T for the SVD W_prev = R [S; 0] V^T. Defined only
// when W_prev is m x n with m > n and full column rank.
class PullbackOperator {
 public:
  PullbackOperator() = default;
  PullbackOperator(DenseMatrix range_basis, Activation activation)
      : basis_(std::move(range_basis)), activation_(activation), defined_(true) {}

  bool defined() const { return defined_; }
  const Activation& activation() const { return activation_; }
  std::size_t dimension() const { return basis_.rows(); }
  const DenseMatrix& range_basis() const { return basis_; }

  Vector apply(std::span<const double> z) const {
    if (!defined_) throw std::logic_error("PullbackOperator::apply: operator is not defined");
    if (z.size() != basis_.rows()) throw std::invalid_argument("PullbackOperator::apply: length mismatch");
    const Vector coeff = basis_.multiply_transposed(z);
    Vector out = basis_.multiply(coeff);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = z[i] - out[i];
    return out;
  }

  // Materialized m x m projector; for diagnostics on small operators.
  DenseMatrix projector() const {
    if (!defined_) throw std::logic_error("PullbackOperator::projector: operator is not defined");
    const std::size_t m = basis_.rows();
    DenseMatrix p = DenseMatrix::identity(m);
    const DenseMatrix qqt = basis_.multiply(basis_.transposed());
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < m; ++c) p(r, c) -= qqt(r, c);
    return p;
  }

 private:
  DenseMatrix basis_;
  Activation activation_;
  bool defined_ = false;
};

inline PullbackOperator pullback_operator(const DenseMatrix& w_prev_circ,
                                          const Activation& activation = Activation::identity(),
                                          double rel_tolerance = linop::kDefaultRankTolerance) {
  const std::size_t m = w_prev_circ.rows();
  const std::size_t n = w_prev_circ.cols();
  if (m == 0 || n == 0 || m <= n) return {};
  if (linop::numerical_rank(w_prev_circ, rel_tolerance) < n) return {};
  return PullbackOperator(linop::orthonormal_column_basis(w_prev_circ), activation);
}

enum class SolveMode { FcExact, LinearLstsq, Reparam, ReparamPullback };

inline std::string to_string(SolveMode m) {
  switch (m) {
    case SolveMode::FcExact: return "fc-exact";
    case SolveMode::LinearLstsq: return "linear-lstsq";
    case SolveMode::Reparam: return "reparam";
    case SolveMode::ReparamPullback: return "reparam+pullback";
  }
  return "?";
}

// Which interior layers get the pull-back term.
//   FullColumnRank: exactly when the previous weight operator is tall with full
//     column rank (the only case in which the constraint exists).
//   AlgorithmListing: the literal branch order of the published pseudocode,
//     i.e. plain reparameterisation whenever rank(W_prev) < |X|.
enum class PullbackRule { FullColumnRank, AlgorithmListing };

enum class DescentMethod { Lbfgs, Gradient };

struct SolverOptions {
  std::size_t max_iters = 5000;
  double tol = 1e-10;               // stop on relative objective change below this
  double abs_tol = 1e-24;           // stop once objective <= abs_tol * ||V||^2
  double pullback_weight = 1.0;
  double step_init = 1.0;
  DescentMethod method = DescentMethod::Lbfgs;
  std::size_t lbfgs_memory = 8;
  PullbackRule pullback_rule = PullbackRule::FullColumnRank;
  double rank_tolerance = linop::kDefaultRankTolerance;
  bool compute_rank = true;  // report rank(U) per layer
};

struct LayerSolution {
  Vector x;
  std::vector<double> objective_history;
  double residual_norm = 0.0;
  SolveMode mode = SolveMode::LinearLstsq;
  std::size_t iterations = 0;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Objective ||U A(x) - V||^2 + w ||P x||^2 on the pre-activation variable x.
class ReparamObjective {
 public:
  ReparamObjective(const SparseRows& u, std::span<const double> v, const Activation& act,
                   const PullbackOperator* pullback, double weight)
      : u_(u), v_(v), act_(act), pullback_(pullback), weight_(weight) {}

  double value(std::span<const double> x, Vector* grad) const {
    Vector a(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) a[i] = act_.apply(x[i]);
    Vector r = u_.multiply(a);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= v_[i];
    double f = dot(r, r);
    Vector px;
    if (pullback_) {
      px = pullback_->apply(x);
      f += weight_ * dot(px, px);
    }
    if (grad) {
      Vector g = u_.multiply_transposed(r);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 2.0 * act_.derivative(x[i]);
      if (pullback_)
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * weight_ * px[i];
      *grad = std::move(g);
    }
    return f;
  }

  double residual_norm(std::span<const double> x) const {
    Vector a(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) a[i] = act_.apply(x[i]);
    Vector r = u_.multiply(a);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= v_[i];
    return std::sqrt(dot(r, r));
  }

 private:
  const SparseRows& u_;
  std::span<const double> v_;
  Activation act_;
  const PullbackOperator* pullback_;
  double weight_;
};

// Monotone descent: L-BFGS or steepest-descent directions, step halved until
// the Armijo condition holds.
inline void descend(const ReparamObjective& obj, Vector& x, const SolverOptions& opts, double v_norm_sq,
                    LayerSolution& sol) {
  Vector g;
  double f = obj.value(x, &g);
  if (!std::isfinite(f)) throw NumericalError("solve_conv_layer: non-finite objective at iteration 0");
  sol.objective_history.push_back(f);
  const double floor = opts.abs_tol * std::max(v_norm_sq, std::numeric_limits<double>::min());

  std::deque<std::pair<Vector, Vector>> memory;  // (s, y)
  double gd_step = opts.step_init;
  const std::size_t n = x.size();
  Vector x_new(n), g_new;

  for (std::size_t it = 1; it <= opts.max_iters; ++it) {
    if (f <= floor) break;
    const double gnorm = std::sqrt(dot(g, g));
    if (!(gnorm > 0.0)) break;

    Vector d(n);
    double step = 1.0;
    if (opts.method == DescentMethod::Lbfgs && !memory.empty()) {
      Vector q = g;
      std::vector<double> alpha(memory.size());
      for (std::size_t k = memory.size(); k-- > 0;) {
        const auto& [s, y] = memory[k];
        alpha[k] = dot(s, q) / dot(y, s);
        for (std::size_t i = 0; i < n; ++i) q[i] -= alpha[k] * y[i];
      }
      const auto& [s_last, y_last] = memory.back();
      const double gamma = dot(s_last, y_last) / dot(y_last, y_last);
      for (std::size_t i = 0; i < n; ++i) q[i] *= gamma;
      for (std::size_t k = 0; k < memory.size(); ++k) {
        const auto& [s, y] = memory[k];
        const double beta = dot(y, q) / dot(y, s);
        for (std::size_t i = 0; i < n; ++i) q[i] += (alpha[k] - beta) * s[i];
      }
      for (std::size_t i = 0; i < n; ++i) d[i] = -q[i];
      if (!(dot(d, g) < 0.0)) {
        memory.clear();
        for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
        step = opts.step_init / gnorm;
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
      step = opts.method == DescentMethod::Lbfgs ? opts.step_init / gnorm : gd_step;
    }

    const double slope = dot(d, g);
    double f_new = f;
    bool accepted = false;
    for (int halvings = 0; halvings < 60; ++halvings, step *= 0.5) {
      for (std::size_t i = 0; i < n; ++i) x_new[i] = x[i] + step * d[i];
      f_new = obj.value(x_new, &g_new);
      if (std::isfinite(f_new) && f_new <= f + 1e-4 * step * slope && f_new < f) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;  // no decrease representable along d
    if (!std::isfinite(f_new)) {
      throw NumericalError("solve_conv_layer: non-finite objective at iteration " + std::to_string(it));
    }

    if (opts.method == DescentMethod::Lbfgs) {
      Vector s(n), y(n);
      for (std::size_t i = 0; i < n; ++i) {
        s[i] = x_new[i] - x[i];
        y[i] = g_new[i] - g[i];
      }
      if (dot(s, y) > 1e-300) {
        memory.emplace_back(std::move(s), std::move(y));
        if (memory.size() > opts.lbfgs_memory) memory.pop_front();
      }
    } else {
      gd_step = 2.0 * step;
    }

    const double rel_change = (f - f_new) / std::max(f, std::numeric_limits<double>::min());
    std::swap(x, x_new);
    std::swap(g, g_new);
    f = f_new;
    sol.objective_history.push_back(f);
    sol.iterations = it;
    if (rel_change < opts.tol) break;
  }
}

}  // namespace detail

// Mode selection:
//   no prev_activation                  -> linear least squares on X directly
//   prev_activation, no/undefined P     -> ||U A(X) - V||^2 over pre-activation X
//   prev_activation, defined P          -> the same plus pullback_weight * ||P X||^2
inline LayerSolution solve_conv_layer(const ConvSystem& sys, const std::optional<Activation>& prev_activation,
                                      const PullbackOperator* pullback, const SolverOptions& opts) {
  if (sys.v.size() != sys.u.rows()) throw std::invalid_argument("solve_conv_layer: V length != U rows");
  LayerSolution sol;
  const double v_norm_sq = detail::dot(sys.v, sys.v);

  if (!prev_activation) {
    sol.mode = SolveMode::LinearLstsq;
    sol.x = linop::lstsq_min_norm(sys.u, sys.v, opts.rank_tolerance);
    Vector r = sys.u.multiply(sol.x);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= sys.v[i];
    sol.residual_norm = std::sqrt(detail::dot(r, r));
    sol.objective_history.push_back(sol.residual_norm * sol.residual_norm);
    if (!std::isfinite(sol.residual_norm)) throw NumericalError("solve_conv_layer: non-finite residual");
    return sol;
  }

  const bool use_pullback = pullback != nullptr && pullback->defined();
  if (use_pullback && pullback->dimension() != sys.u.cols()) {
    throw std::invalid_argument("solve_conv_layer: pull-back operator dimension does not match U columns");
  }
  sol.mode = use_pullback ? SolveMode::ReparamPullback : SolveMode::Reparam;

  // Start from the inverse activation of the clamped linear solution.
  const Vector linear = linop::lstsq_min_norm(sys.u, sys.v, opts.rank_tolerance);
  sol.x.resize(linear.size());
  for (std::size_t i = 0; i < linear.size(); ++i) sol.x[i] = prev_activation->inverse(linear[i]);

  const SparseRows u = SparseRows::from_dense(sys.u);
  const detail::ReparamObjective obj(u, sys.v, *prev_activation, use_pullback ? pullback : nullptr,
                                     opts.pullback_weight);
  detail::descend(obj, sol.x, opts, v_norm_sq, sol);
  sol.residual_norm = obj.residual_norm(sol.x);
  return sol;
}

struct LayerReport {
  std::size_t layer_index = 0;  // 1-based conv index; depth+1 for the FC layer
  SolveMode mode = SolveMode::FcExact;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::optional<std::size_t> rank;
  double residual_norm = 0.0;
  std::size_t iterations = 0;
  double initial_objective = 0.0;
  double final_objective = 0.0;
  bool pullback_defined = false;
  double seconds = 0.0;
};

struct AttackResult {
  TensorMap image;
  std::size_t label = 0;
  bool label_inferred = false;
  Vector fc_input;
  std::vector<LayerReport> layers;  // FC first, then conv layers deepest to first
};

// Full pipeline from the captured gradients to the reconstructed input.
inline AttackResult copa_attack(const net::ModelSpec& spec, const net::ModelWeights& weights,
                                const net::GradientCapture& grads, std::optional<std::size_t> label,
                                const SolverOptions& opts) {
  using clock = std::chrono::steady_clock;
  spec.validate();
  weights.validate(spec);
  if (grads.kernel_grads.size() != spec.depth() || grads.fc_bias_grad.size() != spec.class_count() ||
      grads.fc_weight_grad.rows() != spec.fc.out_dim || grads.fc_weight_grad.cols() != spec.fc.in_dim) {
    throw std::invalid_argument("copa_attack: gradient capture does not match the model");
  }

  AttackResult result;
  if (label) {
    if (*label >= spec.class_count()) throw std::invalid_argument("copa_attack: label out of range");
    result.label = *label;
  } else {
    result.label = infer_label(grads.fc_weight_grad, grads.fc_bias_grad);
    result.label_inferred = true;
  }

  auto t0 = clock::now();
  result.fc_input = reconstruct_fc_input(grads.fc_weight_grad, grads.fc_bias_grad);
  {
    LayerReport rep;
    rep.layer_index = spec.depth() + 1;
    rep.mode = SolveMode::FcExact;
    rep.rows = spec.fc.out_dim * spec.fc.in_dim;
    rep.cols = spec.fc.in_dim;
    rep.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    result.layers.push_back(rep);
  }

  const std::size_t depth = spec.depth();
  if (depth == 0) {
    result.image = TensorMap(spec.input_shape(), result.fc_input);
    return result;
  }

  Vector grad_x_next = weights.fc_weight.multiply_transposed(grads.fc_bias_grad);
  Vector z = net::activation_inverse(spec.conv_layers.back().activation, result.fc_input);

  for (std::size_t li = depth; li-- > 0;) {
    t0 = clock::now();
    const auto& layer = spec.conv_layers[li];
    const auto& kernel = weights.kernels[li];
    try {
      const PropagatedGrads pg = propagate_grads(kernel, layer.geometry, layer.activation, grad_x_next, z);
      ConvSystem sys =
          build_conv_system(li + 1, layer.geometry, kernel, z, grads.kernel_grads[li].values, pg.grad_z);

      LayerReport rep;
      rep.layer_index = li + 1;
      rep.rows = sys.u.rows();
      rep.cols = sys.u.cols();
      if (opts.compute_rank) rep.rank = sys.compute_rank(opts.rank_tolerance);

      LayerSolution sol;
      if (li == 0) {
        sol = solve_conv_layer(sys, std::nullopt, nullptr, opts);
        result.image = TensorMap(layer.geometry.input_shape(), sol.x);
      } else {
        const auto& prev = spec.conv_layers[li - 1];
        const DenseMatrix w_prev = linop::weight_circulant(weights.kernels[li - 1], prev.geometry);
        PullbackOperator pb;
        if (opts.pullback_rule == PullbackRule::FullColumnRank) {
          pb = pullback_operator(w_prev, prev.activation, opts.rank_tolerance);
        } else if (linop::numerical_rank(w_prev, opts.rank_tolerance) >= w_prev.rows()) {
          pb = pullback_operator(w_prev, prev.activation, opts.rank_tolerance);
        }
        rep.pullback_defined = pb.defined();
        sol = solve_conv_layer(sys, prev.activation, &pb, opts);
        z = sol.x;  // pre-activation of the previous layer
      }
      rep.mode = sol.mode;
      rep.residual_norm = sol.residual_norm;
      rep.iterations = sol.iterations;
      rep.initial_objective = sol.objective_history.front();
      rep.final_objective = sol.objective_history.back();
      rep.seconds = std::chrono::duration<double>(clock::now() - t0).count();
      result.layers.push_back(rep);
      grad_x_next = pg.grad_x;
    } catch (const NumericalError& e) {
      throw NumericalError("conv layer " + std::to_string(li + 1) + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("conv layer " + std::to_string(li + 1) + ": " + e.what());
    }
  }
  return result;
}

}  // namespace gradleak::attack
