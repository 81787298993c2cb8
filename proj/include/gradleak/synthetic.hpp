#pragma once

// Deterministic CIFAR-sized test images: smooth two-tone background, a few
// soft-edged shapes and mild low-frequency texture. Used when no real
// CIFAR-10 batch is available.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "gradleak/imaging.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak::synthetic {

inline TensorMap synthetic_image(std::uint64_t seed, std::size_t height = imaging::kCifarSide,
                                 std::size_t width = imaging::kCifarSide) {
  std::mt19937_64 gen(seed ^ 0x5eedf00dULL);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TensorMap img(Shape3{3, height, width});

  double top[3], bottom[3];
  for (int c = 0; c < 3; ++c) {
    top[c] = 0.15 + 0.7 * u(gen);
    bottom[c] = 0.15 + 0.7 * u(gen);
  }
  const double horizon = 0.3 + 0.4 * u(gen);
  for (std::size_t y = 0; y < height; ++y) {
    const double t = std::clamp((static_cast<double>(y) / height - horizon) * 6.0 + 0.5, 0.0, 1.0);
    for (std::size_t x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = (1.0 - t) * top[c] + t * bottom[c];
  }

  const int shapes = 2 + static_cast<int>(u(gen) * 3.0);
  for (int s = 0; s < shapes; ++s) {
    const double cy = u(gen) * height, cx = u(gen) * width;
    const double ry = 3.0 + u(gen) * height * 0.3, rx = 3.0 + u(gen) * width * 0.3;
    const bool box = u(gen) < 0.4;
    double colour[3];
    for (double& v : colour) v = u(gen);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double dy = (y - cy) / ry, dx = (x - cx) / rx;
        const double dist = box ? std::max(std::abs(dy), std::abs(dx)) : std::sqrt(dy * dy + dx * dx);
        const double alpha = std::clamp((1.0 - dist) * 4.0, 0.0, 1.0);
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = (1.0 - alpha) * img.at(c, y, x) + alpha * colour[c];
      }
  }

  const double fy = 0.2 + u(gen) * 0.6, fx = 0.2 + u(gen) * 0.6, phase = u(gen) * 6.283;
  std::normal_distribution<double> noise(0.0, 0.015);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double tex = 0.04 * std::sin(fy * y + fx * x + phase);
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = std::clamp(img.at(c, y, x) + tex + noise(gen), 0.0, 1.0);
    }
  return img;
}

// Quantized to 8 bits like real CIFAR records; labels cycle through 0..9.
inline std::vector<imaging::LabeledImage> synthetic_batch(std::size_t count, std::uint64_t seed) {
  std::vector<imaging::LabeledImage> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    imaging::LabeledImage r;
    r.image = synthetic_image(seed * 1000003ULL + i);
    for (double& v : r.image.values) v = imaging::quantize(v) / 255.0;
    r.label = i % 10;
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_synthetic_cifar10(const std::filesystem::path& path, std::size_t count, std::uint64_t seed) {
  imaging::write_cifar10(path, synthetic_batch(count, seed));
}

}  // namespace gradleak::synthetic
