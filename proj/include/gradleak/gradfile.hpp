#pragma once

// Binary gradient file.
//
//   "GLK1"                     4 bytes
//   u32 layer_count
//   per layer:
//     u32 tensor_count         1 for a conv layer, 2 for the fc layer
//     per tensor:
//       u32 ndims, u32 dims[ndims]
//       f64 values[prod(dims)]
//
// All integers and reals little-endian. Conv kernel gradients are stored as
// [out, in, k, k]; the fc layer as W [classes, in] followed by b [classes].

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gradleak/error.hpp"
#include "gradleak/net.hpp"

namespace gradleak::gradfile {

static_assert(std::endian::native == std::endian::little, "gradient files assume a little-endian host");

inline constexpr char kMagic[4] = {'G', 'L', 'K', '1'};

struct Tensor {
  std::vector<std::uint32_t> dims;
  Vector values;
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

inline void put_tensor(std::ostream& out, const std::vector<std::uint32_t>& dims, std::span<const double> values) {
  put_u32(out, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) put_u32(out, d);
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 8));
}

inline std::uint32_t get_u32(std::istream& in, const std::string& origin) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (in.gcount() != 4) throw ConfigError(origin + ": truncated gradient file");
  return v;
}

inline Tensor get_tensor(std::istream& in, const std::string& origin) {
  Tensor t;
  const auto nd = get_u32(in, origin);
  if (nd == 0 || nd > 8) throw ConfigError(origin + ": implausible tensor rank " + std::to_string(nd));
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < nd; ++i) {
    t.dims.push_back(get_u32(in, origin));
    count *= t.dims.back();
  }
  if (count > (std::size_t{1} << 31)) throw ConfigError(origin + ": implausible tensor size");
  t.values.resize(count);
  in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(count * 8));
  if (in.gcount() != static_cast<std::streamsize>(count * 8)) throw ConfigError(origin + ": truncated gradient file");
  return t;
}

}  // namespace detail

inline std::size_t real_count(const net::GradientCapture& g) {
  std::size_t n = g.fc_weight_grad.rows() * g.fc_weight_grad.cols() + g.fc_bias_grad.size();
  for (const auto& k : g.kernel_grads) n += k.values.size();
  return n;
}

inline void write_gradients(const std::filesystem::path& path, const net::GradientCapture& g) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write gradient file " + path.string());
  out.write(kMagic, 4);
  detail::put_u32(out, static_cast<std::uint32_t>(g.kernel_grads.size() + 1));
  for (const auto& k : g.kernel_grads) {
    detail::put_u32(out, 1);
    detail::put_tensor(out,
                       {static_cast<std::uint32_t>(k.out_channels), static_cast<std::uint32_t>(k.in_channels),
                        static_cast<std::uint32_t>(k.size), static_cast<std::uint32_t>(k.size)},
                       k.values);
  }
  detail::put_u32(out, 2);
  detail::put_tensor(out,
                     {static_cast<std::uint32_t>(g.fc_weight_grad.rows()),
                      static_cast<std::uint32_t>(g.fc_weight_grad.cols())},
                     g.fc_weight_grad.values());
  detail::put_tensor(out, {static_cast<std::uint32_t>(g.fc_bias_grad.size())}, g.fc_bias_grad);
  if (!out) throw ConfigError("write failed for " + path.string());
}

// The label is not part of the file; the returned capture has none.
inline net::GradientCapture read_gradients(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open gradient file " + path.string());
  const std::string origin = path.string();
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) throw ConfigError(origin + ": not a GLK1 gradient file");
  const auto layers = detail::get_u32(in, origin);
  if (layers == 0) throw ConfigError(origin + ": no layers");
  net::GradientCapture g;
  for (std::uint32_t l = 0; l + 1 < layers; ++l) {
    if (detail::get_u32(in, origin) != 1) throw ConfigError(origin + ": conv layer must hold one tensor");
    Tensor t = detail::get_tensor(in, origin);
    if (t.dims.size() != 4 || t.dims[2] != t.dims[3]) {
      throw ConfigError(origin + ": conv gradient " + std::to_string(l + 1) + " is not [out, in, k, k]");
    }
    linop::Kernel k = linop::Kernel::zeros(t.dims[0], t.dims[1], t.dims[2]);
    k.values = std::move(t.values);
    g.kernel_grads.push_back(std::move(k));
  }
  if (detail::get_u32(in, origin) != 2) throw ConfigError(origin + ": fc layer must hold weight and bias tensors");
  Tensor w = detail::get_tensor(in, origin);
  Tensor b = detail::get_tensor(in, origin);
  if (w.dims.size() != 2 || b.dims.size() != 1 || b.dims[0] != w.dims[0]) {
    throw ConfigError(origin + ": fc gradient shapes are inconsistent");
  }
  g.fc_weight_grad = linop::DenseMatrix(w.dims[0], w.dims[1], std::move(w.values));
  g.fc_bias_grad = std::move(b.values);
  if (in.peek() != std::char_traits<char>::eof()) throw ConfigError(origin + ": trailing bytes after fc layer");
  return g;
}

// Throws ConfigError when the capture's shapes do not fit the model.
inline void check_against(const net::GradientCapture& g, const net::ModelSpec& spec) {
  if (g.kernel_grads.size() != spec.depth()) {
    throw ConfigError("gradient file has " + std::to_string(g.kernel_grads.size()) + " conv layers, model has " +
                      std::to_string(spec.depth()));
  }
  for (std::size_t i = 0; i < spec.depth(); ++i) {
    if (!g.kernel_grads[i].matches(spec.conv_layers[i].geometry)) {
      throw ConfigError("gradient of conv layer " + std::to_string(i + 1) + " does not match the model");
    }
  }
  if (g.fc_weight_grad.rows() != spec.fc.out_dim || g.fc_weight_grad.cols() != spec.fc.in_dim ||
      g.fc_bias_grad.size() != spec.fc.out_dim) {
    throw ConfigError("fc gradient does not match the model");
  }
}

}  // namespace gradleak::gradfile
