#pragma once

// Target network family: consecutive bias-free convolutions followed by a
// single fully-connected layer with bias, softmax + negative log-likelihood
// loss. Forward and backward passes are written out by hand.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gradleak/error.hpp"
#include "gradleak/linop.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak::net {

using linop::ConvGeometry;
using linop::DenseMatrix;
using linop::Kernel;

// Inverse activations clamp their argument this far inside the open range.
inline constexpr double kInverseClamp = 1e-7;
inline constexpr double kDefaultLeakySlope = 0.01;

enum class ActivationKind { Identity, Tanh, Sigmoid, LeakyReLU };

struct Activation {
  ActivationKind kind = ActivationKind::Identity;
  double slope = kDefaultLeakySlope;  // LeakyReLU only

  static Activation identity() { return {ActivationKind::Identity, kDefaultLeakySlope}; }
  static Activation tanh() { return {ActivationKind::Tanh, kDefaultLeakySlope}; }
  static Activation sigmoid() { return {ActivationKind::Sigmoid, kDefaultLeakySlope}; }
  static Activation leaky_relu(double slope = kDefaultLeakySlope) {
    if (!(slope > 0.0)) throw std::invalid_argument("LeakyReLU slope must be positive");
    return {ActivationKind::LeakyReLU, slope};
  }

  static Activation parse(std::string_view name, double slope = kDefaultLeakySlope) {
    if (name == "identity" || name == "linear") return identity();
    if (name == "tanh") return tanh();
    if (name == "sigmoid") return sigmoid();
    if (name == "leaky_relu" || name == "leakyrelu" || name == "lrelu") return leaky_relu(slope);
    throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
  }

  std::string name() const {
    switch (kind) {
      case ActivationKind::Identity: return "identity";
      case ActivationKind::Tanh: return "tanh";
      case ActivationKind::Sigmoid: return "sigmoid";
      case ActivationKind::LeakyReLU: return "leaky_relu";
    }
    return "?";
  }

  bool nonnegative_range() const { return kind == ActivationKind::Sigmoid; }

  double apply(double v) const {
    switch (kind) {
      case ActivationKind::Identity: return v;
      case ActivationKind::Tanh: return std::tanh(v);
      case ActivationKind::Sigmoid:
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        else {
          const double e = std::exp(v);
          return e / (1.0 + e);
        }
      case ActivationKind::LeakyReLU: return v > 0.0 ? v : slope * v;
    }
    return v;
  }

  double derivative(double v) const {
    switch (kind) {
      case ActivationKind::Identity: return 1.0;
      case ActivationKind::Tanh: {
        const double t = std::tanh(v);
        return 1.0 - t * t;
      }
      case ActivationKind::Sigmoid: {
        const double s = apply(v);
        return s * (1.0 - s);
      }
      case ActivationKind::LeakyReLU: return v > 0.0 ? 1.0 : slope;
    }
    return 1.0;
  }

  double inverse(double v) const {
    switch (kind) {
      case ActivationKind::Identity: return v;
      case ActivationKind::Tanh: return std::atanh(std::clamp(v, -1.0 + kInverseClamp, 1.0 - kInverseClamp));
      case ActivationKind::Sigmoid: {
        const double c = std::clamp(v, kInverseClamp, 1.0 - kInverseClamp);
        return std::log(c / (1.0 - c));
      }
      case ActivationKind::LeakyReLU: return v > 0.0 ? v : v / slope;
    }
    return v;
  }

  // Clamps v into the range where inverse() is exact.
  double clamp_to_range(double v) const {
    switch (kind) {
      case ActivationKind::Tanh: return std::clamp(v, -1.0 + kInverseClamp, 1.0 - kInverseClamp);
      case ActivationKind::Sigmoid: return std::clamp(v, kInverseClamp, 1.0 - kInverseClamp);
      default: return v;
    }
  }

  bool operator==(const Activation& o) const {
    return kind == o.kind && (kind != ActivationKind::LeakyReLU || slope == o.slope);
  }
};

namespace detail {
template <typename F>
Vector map_finite(std::span<const double> v, const char* what, F&& f) {
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericalError(std::string(what) + ": non-finite input at index " + std::to_string(i));
    }
    out[i] = f(v[i]);
  }
  return out;
}
}  // namespace detail

inline Vector activation_apply(const Activation& a, std::span<const double> v) {
  return detail::map_finite(v, "activation_apply", [&](double x) { return a.apply(x); });
}
inline Vector activation_derivative(const Activation& a, std::span<const double> v) {
  return detail::map_finite(v, "activation_derivative", [&](double x) { return a.derivative(x); });
}
inline Vector activation_inverse(const Activation& a, std::span<const double> v) {
  return detail::map_finite(v, "activation_inverse", [&](double x) { return a.inverse(x); });
}

struct ConvLayer {
  ConvGeometry geometry;
  Activation activation;
};

// The fully-connected layer feeds logits straight into the softmax.
struct FullyConnectedLayer {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::identity();
};

// Convenience description of one convolution in a chain: kernel width,
// output channels, stride.
struct ConvStage {
  std::size_t kernel = 0;
  std::size_t channels = 0;
  std::size_t stride = 1;
  Activation activation;
};

struct ModelSpec {
  std::vector<ConvLayer> conv_layers;
  FullyConnectedLayer fc;

  std::size_t class_count() const { return fc.out_dim; }
  std::size_t depth() const { return conv_layers.size(); }

  Shape3 input_shape() const {
    if (conv_layers.empty()) return {1, 1, fc.in_dim};
    return conv_layers.front().geometry.input_shape();
  }

  void validate() const {
    for (std::size_t i = 0; i < conv_layers.size(); ++i) {
      conv_layers[i].geometry.validate();
      if (i > 0 && conv_layers[i].geometry.input_shape() != conv_layers[i - 1].geometry.output_shape()) {
        throw std::invalid_argument("ModelSpec: conv layer " + std::to_string(i + 1) + " expects input " +
                                    conv_layers[i].geometry.input_shape().str() + " but layer " +
                                    std::to_string(i) + " produces " +
                                    conv_layers[i - 1].geometry.output_shape().str());
      }
    }
    const std::size_t feature = conv_layers.empty() ? fc.in_dim : conv_layers.back().geometry.output_size();
    if (fc.in_dim != feature) {
      throw std::invalid_argument("ModelSpec: fully-connected input " + std::to_string(fc.in_dim) +
                                  " does not match feature size " + std::to_string(feature));
    }
    if (fc.out_dim < 2) throw std::invalid_argument("ModelSpec: need at least two classes");
    if (fc.activation.kind != ActivationKind::Identity) {
      throw std::invalid_argument("ModelSpec: the fully-connected layer must use the identity activation");
    }
  }

  static ModelSpec build(Shape3 input, const std::vector<ConvStage>& stages, std::size_t class_count) {
    ModelSpec spec;
    Shape3 shape = input;
    for (const auto& st : stages) {
      ConvGeometry g{shape.height, shape.width, shape.channels, st.kernel, st.channels, st.stride};
      g.validate();
      spec.conv_layers.push_back({g, st.activation});
      shape = g.output_shape();
    }
    spec.fc = {shape.size(), class_count, Activation::identity()};
    spec.validate();
    return spec;
  }
};

struct ModelWeights {
  std::vector<Kernel> kernels;
  DenseMatrix fc_weight;  // class_count x in_dim
  Vector fc_bias;         // class_count

  void validate(const ModelSpec& spec) const {
    if (kernels.size() != spec.conv_layers.size()) {
      throw std::invalid_argument("ModelWeights: " + std::to_string(kernels.size()) + " kernels for " +
                                  std::to_string(spec.conv_layers.size()) + " conv layers");
    }
    for (std::size_t i = 0; i < kernels.size(); ++i) {
      if (!kernels[i].matches(spec.conv_layers[i].geometry)) {
        throw std::invalid_argument("ModelWeights: kernel " + std::to_string(i + 1) + " has the wrong shape");
      }
    }
    if (fc_weight.rows() != spec.fc.out_dim || fc_weight.cols() != spec.fc.in_dim ||
        fc_bias.size() != spec.fc.out_dim) {
      throw std::invalid_argument("ModelWeights: fully-connected parameters have the wrong shape");
    }
  }
};

// Uniform draw on [0, 1) from the top 53 bits, so a seed reproduces the same
// weights with any standard library.
inline double unit_uniform(std::mt19937_64& gen) {
  return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

// Draw order: conv kernels in layer order, then FC weight (row-major), then FC bias.
inline ModelWeights init_weights(const ModelSpec& spec, std::uint64_t seed, double low, double high) {
  if (!(low < high)) throw std::invalid_argument("init_weights: need low < high");
  spec.validate();
  std::mt19937_64 gen(seed);
  auto draw = [&] { return low + (high - low) * unit_uniform(gen); };
  ModelWeights w;
  for (const auto& layer : spec.conv_layers) {
    Kernel k = Kernel::zeros(layer.geometry);
    for (double& v : k.values) v = draw();
    w.kernels.push_back(std::move(k));
  }
  w.fc_weight = DenseMatrix(spec.fc.out_dim, spec.fc.in_dim);
  for (std::size_t r = 0; r < w.fc_weight.rows(); ++r)
    for (double& v : w.fc_weight.row(r)) v = draw();
  w.fc_bias.resize(spec.fc.out_dim);
  for (double& v : w.fc_bias) v = draw();
  return w;
}

// Direct strided convolution, no padding.
inline Vector conv_forward(const Kernel& kernel, const ConvGeometry& g, std::span<const double> x) {
  if (x.size() != g.input_size()) throw std::invalid_argument("conv_forward: input size mismatch");
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel_size, s = g.stride;
  Vector z(g.output_size(), 0.0);
  for (std::size_t o = 0; o < g.out_channels; ++o)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        double acc = 0.0;
        for (std::size_t c = 0; c < g.in_channels; ++c)
          for (std::size_t ky = 0; ky < k; ++ky) {
            const double* xrow = x.data() + (c * g.in_height + s * y + ky) * g.in_width + s * xo;
            for (std::size_t kx = 0; kx < k; ++kx) acc += kernel.at(o, c, ky, kx) * xrow[kx];
          }
        z[(o * oh + y) * ow + xo] = acc;
      }
  return z;
}

// dJ/dKernel given dJ/dZ and the layer input.
inline Kernel conv_kernel_gradient(const ConvGeometry& g, std::span<const double> grad_z,
                                   std::span<const double> x) {
  if (grad_z.size() != g.output_size() || x.size() != g.input_size()) {
    throw std::invalid_argument("conv_kernel_gradient: size mismatch");
  }
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel_size, s = g.stride;
  Kernel gk = Kernel::zeros(g);
  for (std::size_t o = 0; o < g.out_channels; ++o)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        const double gz = grad_z[(o * oh + y) * ow + xo];
        if (gz == 0.0) continue;
        for (std::size_t c = 0; c < g.in_channels; ++c)
          for (std::size_t ky = 0; ky < k; ++ky) {
            const double* xrow = x.data() + (c * g.in_height + s * y + ky) * g.in_width + s * xo;
            for (std::size_t kx = 0; kx < k; ++kx) gk.at(o, c, ky, kx) += gz * xrow[kx];
          }
      }
  return gk;
}

// dJ/dX given dJ/dZ: the transposed convolution.
inline Vector conv_input_gradient(const Kernel& kernel, const ConvGeometry& g, std::span<const double> grad_z) {
  if (grad_z.size() != g.output_size()) throw std::invalid_argument("conv_input_gradient: size mismatch");
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel_size, s = g.stride;
  Vector gx(g.input_size(), 0.0);
  for (std::size_t o = 0; o < g.out_channels; ++o)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        const double gz = grad_z[(o * oh + y) * ow + xo];
        if (gz == 0.0) continue;
        for (std::size_t c = 0; c < g.in_channels; ++c)
          for (std::size_t ky = 0; ky < k; ++ky) {
            double* row = gx.data() + (c * g.in_height + s * y + ky) * g.in_width + s * xo;
            for (std::size_t kx = 0; kx < k; ++kx) row[kx] += gz * kernel.at(o, c, ky, kx);
          }
      }
  return gx;
}

struct LayerTrace {
  Vector input;           // X^(i)
  Vector pre_activation;  // Z^(i)
  Vector output;          // X^(i+1) = A(Z^(i))
};

// Layers are listed input-first; the last entry is the fully-connected layer,
// whose pre-activation holds the logits.
struct ForwardTrace {
  std::vector<LayerTrace> layers;
  Vector logits;
  Vector log_probabilities;

  double loss(std::size_t label) const {
    if (label >= log_probabilities.size()) throw std::invalid_argument("loss: label out of range");
    return -log_probabilities[label];
  }
  Vector probabilities() const {
    Vector p(log_probabilities.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(log_probabilities[i]);
    return p;
  }
};

struct GradientCapture {
  std::vector<Kernel> kernel_grads;
  DenseMatrix fc_weight_grad;
  Vector fc_bias_grad;
  std::optional<std::size_t> label;  // known to the victim, absent when read from disk
};

// Backprop intermediates, indexed like ForwardTrace::layers.
struct BackwardTrace {
  std::vector<Vector> grad_pre_activation;  // dJ/dZ^(i)
  std::vector<Vector> grad_input;           // dJ/dX^(i)
};

struct GradientResult {
  double loss = 0.0;
  GradientCapture grads;
  ForwardTrace trace;
  BackwardTrace backward;
};

inline ForwardTrace forward(const ModelSpec& spec, const ModelWeights& weights, const TensorMap& x0) {
  weights.validate(spec);
  if (x0.values.size() != spec.input_shape().size() ||
      (!spec.conv_layers.empty() && x0.shape != spec.input_shape())) {
    throw std::invalid_argument("forward: input shape " + x0.shape.str() + " does not match model input " +
                                spec.input_shape().str());
  }
  ForwardTrace trace;
  Vector x = x0.values;
  for (std::size_t i = 0; i < spec.conv_layers.size(); ++i) {
    const auto& layer = spec.conv_layers[i];
    LayerTrace lt;
    lt.input = x;
    lt.pre_activation = conv_forward(weights.kernels[i], layer.geometry, x);
    lt.output = activation_apply(layer.activation, lt.pre_activation);
    x = lt.output;
    trace.layers.push_back(std::move(lt));
  }
  LayerTrace fc;
  fc.input = x;
  fc.pre_activation = weights.fc_weight.multiply(x);
  for (std::size_t k = 0; k < fc.pre_activation.size(); ++k) fc.pre_activation[k] += weights.fc_bias[k];
  fc.output = fc.pre_activation;
  trace.logits = fc.pre_activation;
  trace.layers.push_back(std::move(fc));

  const double mx = *std::max_element(trace.logits.begin(), trace.logits.end());
  double sum = 0.0;
  for (double l : trace.logits) sum += std::exp(l - mx);
  const double lse = mx + std::log(sum);
  trace.log_probabilities.resize(trace.logits.size());
  for (std::size_t k = 0; k < trace.logits.size(); ++k) trace.log_probabilities[k] = trace.logits[k] - lse;
  if (!std::isfinite(lse)) throw NumericalError("forward: non-finite logits");
  return trace;
}

inline GradientResult loss_and_gradients(const ModelSpec& spec, const ModelWeights& weights, const TensorMap& x0,
                                         std::size_t label) {
  if (label >= spec.class_count()) {
    throw std::invalid_argument("loss_and_gradients: label " + std::to_string(label) + " >= class count " +
                                std::to_string(spec.class_count()));
  }
  GradientResult r;
  r.trace = forward(spec, weights, x0);
  r.loss = r.trace.loss(label);
  r.grads.label = label;

  const std::size_t depth = spec.conv_layers.size();
  r.backward.grad_pre_activation.resize(depth + 1);
  r.backward.grad_input.resize(depth + 1);

  // Softmax + NLL: dJ/dlogits = p - onehot. The FC bias gradient equals it.
  Vector gz = r.trace.probabilities();
  gz[label] -= 1.0;
  const auto& fc_in = r.trace.layers.back().input;
  r.grads.fc_bias_grad = gz;
  r.grads.fc_weight_grad = DenseMatrix(spec.fc.out_dim, spec.fc.in_dim);
  for (std::size_t k = 0; k < gz.size(); ++k) {
    auto row = r.grads.fc_weight_grad.row(k);
    for (std::size_t l = 0; l < fc_in.size(); ++l) row[l] = gz[k] * fc_in[l];
  }
  Vector gx = weights.fc_weight.multiply_transposed(gz);
  r.backward.grad_pre_activation[depth] = gz;
  r.backward.grad_input[depth] = gx;

  r.grads.kernel_grads.resize(depth);
  for (std::size_t i = depth; i-- > 0;) {
    const auto& layer = spec.conv_layers[i];
    const auto& lt = r.trace.layers[i];
    const Vector da = activation_derivative(layer.activation, lt.pre_activation);
    Vector gzi(gx.size());
    for (std::size_t p = 0; p < gzi.size(); ++p) gzi[p] = gx[p] * da[p];
    r.grads.kernel_grads[i] = conv_kernel_gradient(layer.geometry, gzi, lt.input);
    gx = conv_input_gradient(weights.kernels[i], layer.geometry, gzi);
    r.backward.grad_pre_activation[i] = std::move(gzi);
    r.backward.grad_input[i] = gx;
  }
  return r;
}

}  // namespace gradleak::net
