#pragma once

// The two-conv-layer CIFAR test network and its four geometry variants.
// Layer tuples are (kernel, output channels, stride), no padding.
//
//   variant 1: (3,6,1) (4,3,2)   fc 588
//   variant 2: (4,6,2) (3,3,2)   fc 147
//   variant 3: (3,6,1) (3,9,1)   fc 7056
//   variant 4: (3,1,1) (3,6,1)   fc 4704

#include <array>
#include <stdexcept>
#include <string>

#include "gradleak/config.hpp"
#include "gradleak/net.hpp"

namespace gradleak::cnn3 {

inline constexpr int kVariantCount = 4;

// Tanh: tanh on both conv layers.
// LeakySigmoid: LeakyReLU on conv 1, Sigmoid on conv 2 (nonnegative fc input).
enum class ActivationSuite { Tanh, LeakySigmoid };

inline std::string to_string(ActivationSuite s) { return s == ActivationSuite::Tanh ? "tanh" : "leaky_sigmoid"; }

inline ActivationSuite parse_suite(const std::string& name) {
  if (name == "tanh") return ActivationSuite::Tanh;
  if (name == "leaky_sigmoid") return ActivationSuite::LeakySigmoid;
  throw std::invalid_argument("unknown activation suite '" + name + "'");
}

struct LayerShape {
  std::size_t kernel, channels, stride;
};

inline std::array<LayerShape, 2> variant_layers(int variant) {
  switch (variant) {
    case 1: return {{{3, 6, 1}, {4, 3, 2}}};
    case 2: return {{{4, 6, 2}, {3, 3, 2}}};
    case 3: return {{{3, 6, 1}, {3, 9, 1}}};
    case 4: return {{{3, 1, 1}, {3, 6, 1}}};
    default: throw std::invalid_argument("variant must be 1..4, got " + std::to_string(variant));
  }
}

inline config::ModelConfig model(int variant, ActivationSuite suite, std::uint64_t seed = 0, double low = -0.5,
                                 double high = 0.5) {
  const auto layers = variant_layers(variant);
  config::ModelConfig cfg;
  cfg.input = {3, 32, 32};
  cfg.classes = 10;
  cfg.seed = seed;
  cfg.init_low = low;
  cfg.init_high = high;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    net::Activation act = net::Activation::tanh();
    if (suite == ActivationSuite::LeakySigmoid) act = i == 0 ? net::Activation::leaky_relu() : net::Activation::sigmoid();
    cfg.stages.push_back({layers[i].kernel, layers[i].channels, layers[i].stride, act});
  }
  return cfg;
}

}  // namespace gradleak::cnn3
