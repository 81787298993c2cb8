#pragma once

// Image I/O (CIFAR-10 binary batches, binary PPM/PGM), Chambolle total-variation
// denoising and reconstruction scoring.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "gradleak/error.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak::imaging {

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarChannels = 3;
inline constexpr std::size_t kCifarPixels = kCifarSide * kCifarSide * kCifarChannels;
inline constexpr std::size_t kCifarRecord = kCifarPixels + 1;

struct LabeledImage {
  TensorMap image;
  std::size_t label = 0;
};

inline Shape3 cifar_shape() { return {kCifarChannels, kCifarSide, kCifarSide}; }

// [0,1] -> byte, rounding half up.
inline std::uint8_t quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(c * 255.0 + 0.5));
}

inline std::size_t cifar10_record_count(const std::filesystem::path& path) {
  std::error_code ec;
  const auto bytes = std::filesystem::file_size(path, ec);
  if (ec) throw ConfigError("cannot stat CIFAR-10 file " + path.string() + ": " + ec.message());
  if (bytes % kCifarRecord != 0) {
    throw ConfigError("CIFAR-10 file " + path.string() + " has " + std::to_string(bytes) +
                      " bytes, not a multiple of " + std::to_string(kCifarRecord));
  }
  return bytes / kCifarRecord;
}

// One record: label byte, then 1024 R, 1024 G, 1024 B bytes in row-major order.
inline LabeledImage load_cifar10(const std::filesystem::path& path, std::size_t index) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open CIFAR-10 file " + path.string());
  const std::size_t count = cifar10_record_count(path);
  if (index >= count) {
    throw ConfigError("CIFAR-10 index " + std::to_string(index) + " out of range (" + std::to_string(count) +
                      " records in " + path.string() + ")");
  }
  in.seekg(static_cast<std::streamoff>(index * kCifarRecord));
  std::vector<unsigned char> rec(kCifarRecord);
  in.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  if (in.gcount() != static_cast<std::streamsize>(rec.size())) {
    throw ConfigError("short read in CIFAR-10 file " + path.string());
  }
  LabeledImage out;
  out.label = rec[0];
  if (out.label > 9) throw ConfigError("CIFAR-10 record " + std::to_string(index) + " has label " +
                                       std::to_string(out.label));
  out.image = TensorMap(cifar_shape());
  for (std::size_t p = 0; p < kCifarPixels; ++p) out.image.values[p] = rec[p + 1] / 255.0;
  return out;
}

inline void write_cifar10(const std::filesystem::path& path, const std::vector<LabeledImage>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  std::vector<unsigned char> rec(kCifarRecord);
  for (const auto& r : records) {
    if (r.image.shape != cifar_shape()) throw ConfigError("write_cifar10: image shape " + r.image.shape.str());
    if (r.label > 9) throw ConfigError("write_cifar10: label " + std::to_string(r.label));
    rec[0] = static_cast<unsigned char>(r.label);
    for (std::size_t p = 0; p < kCifarPixels; ++p) rec[p + 1] = quantize(r.image.values[p]);
    out.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
  if (!out) throw ConfigError("write failed for " + path.string());
}

// P6 for three channels, P5 for one.
inline void save_ppm(const std::filesystem::path& path, const TensorMap& img) {
  const auto& s = img.shape;
  if (s.channels != 3 && s.channels != 1) {
    throw ConfigError("save_ppm: need 1 or 3 channels, got " + std::to_string(s.channels));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << (s.channels == 3 ? "P6" : "P5") << "\n" << s.width << " " << s.height << "\n255\n";
  std::vector<unsigned char> buf(s.size());
  std::size_t k = 0;
  for (std::size_t y = 0; y < s.height; ++y)
    for (std::size_t x = 0; x < s.width; ++x)
      for (std::size_t c = 0; c < s.channels; ++c) buf[k++] = quantize(img.at(c, y, x));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw ConfigError("write failed for " + path.string());
}

namespace detail {

inline std::size_t read_header_number(std::istream& in, const std::string& what) {
  for (;;) {
    const int ch = in.peek();
    if (ch == '#') {
      in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      break;
    }
  }
  std::size_t v = 0;
  if (!(in >> v)) throw ConfigError("malformed PPM header: " + what);
  return v;
}

}  // namespace detail

inline TensorMap load_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6" && magic != "P5") throw ConfigError(path.string() + ": unsupported image magic '" + magic + "'");
  const std::size_t channels = magic == "P6" ? 3 : 1;
  const std::size_t w = detail::read_header_number(in, "width");
  const std::size_t h = detail::read_header_number(in, "height");
  const std::size_t maxval = detail::read_header_number(in, "maxval");
  if (maxval != 255) throw ConfigError(path.string() + ": only 8-bit images are supported");
  in.get();
  TensorMap img(Shape3{channels, h, w});
  std::vector<unsigned char> buf(img.values.size());
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw ConfigError("short read in " + path.string());
  std::size_t k = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c) img.at(c, y, x) = buf[k++] / 255.0;
  return img;
}

struct TvOptions {
  double weight = 0.15;
  double eps = 2e-4;
  std::size_t max_iters = 200;
};

// Chambolle's projection algorithm on one h x w plane, forward differences,
// step 1/(2*ndim) = 0.25. Stops once the relative energy change falls below
// eps times the initial energy.
inline Vector tv_denoise_plane(std::span<const double> image, std::size_t h, std::size_t w, const TvOptions& opt) {
  const std::size_t n = h * w;
  Vector out(image.begin(), image.end());
  if (n == 0 || opt.weight <= 0.0) return out;
  Vector py(n, 0.0), px(n, 0.0), gy(n, 0.0), gx(n, 0.0), d(n, 0.0);
  const double tau = 0.25;
  double e_init = 0.0, e_prev = 0.0;

  for (std::size_t it = 0; it < opt.max_iters; ++it) {
    if (it > 0) {
      for (std::size_t p = 0; p < n; ++p) d[p] = -(py[p] + px[p]);
      for (std::size_t y = 1; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) d[y * w + x] += py[(y - 1) * w + x];
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 1; x < w; ++x) d[y * w + x] += px[y * w + x - 1];
      for (std::size_t p = 0; p < n; ++p) out[p] = image[p] + d[p];
    }
    double e = 0.0;
    for (double v : d) e += v * v;

    for (std::size_t y = 0; y + 1 < h; ++y)
      for (std::size_t x = 0; x < w; ++x) gy[y * w + x] = out[(y + 1) * w + x] - out[y * w + x];
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x + 1 < w; ++x) gx[y * w + x] = out[y * w + x + 1] - out[y * w + x];

    for (std::size_t p = 0; p < n; ++p) {
      const double norm = std::sqrt(gy[p] * gy[p] + gx[p] * gx[p]);
      e += opt.weight * norm;
      const double denom = 1.0 + norm * tau / opt.weight;
      py[p] = (py[p] - tau * gy[p]) / denom;
      px[p] = (px[p] - tau * gx[p]) / denom;
    }
    e /= static_cast<double>(n);
    if (it == 0) {
      e_init = e;
      e_prev = e;
    } else {
      if (std::abs(e_prev - e) < opt.eps * e_init) break;
      e_prev = e;
    }
  }
  return out;
}

// Channels are denoised independently.
inline TensorMap tv_denoise(const TensorMap& img, const TvOptions& opt = {}) {
  if (opt.weight < 0.0) throw ConfigError("tv_denoise: negative weight");
  for (double v : img.values)
    if (!std::isfinite(v)) throw NumericalError("tv_denoise: non-finite input value");
  const auto& s = img.shape;
  const std::size_t plane = s.height * s.width;
  TensorMap out(s);
  for (std::size_t c = 0; c < s.channels; ++c) {
    const Vector ch =
        tv_denoise_plane(std::span<const double>(img.values).subspan(c * plane, plane), s.height, s.width, opt);
    std::copy(ch.begin(), ch.end(), out.values.begin() + static_cast<std::ptrdiff_t>(c * plane));
  }
  return out;
}

// Isotropic TV with forward differences, summed over channels.
inline double total_variation(const TensorMap& img) {
  const auto& s = img.shape;
  double tv = 0.0;
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t y = 0; y < s.height; ++y)
      for (std::size_t x = 0; x < s.width; ++x) {
        const double v = img.at(c, y, x);
        const double dy = y + 1 < s.height ? img.at(c, y + 1, x) - v : 0.0;
        const double dx = x + 1 < s.width ? img.at(c, y, x + 1) - v : 0.0;
        tv += std::sqrt(dy * dy + dx * dx);
      }
  return tv;
}

struct QualityScore {
  double mse = 0.0;
  double psnr_db = 0.0;
};

// PSNR against an 8-bit peak with the MSE measured on the [0,1] scale. This
// is the convention of the published tables, not the textbook one.
inline double psnr_from_mse(double mse) {
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

inline QualityScore quality(const TensorMap& reference, const TensorMap& candidate) {
  if (reference.values.size() != candidate.values.size()) {
    throw ConfigError("quality: shape " + reference.shape.str() + " vs " + candidate.shape.str());
  }
  if (reference.values.empty()) throw ConfigError("quality: empty image");
  double s = 0.0;
  for (std::size_t i = 0; i < reference.values.size(); ++i) {
    const double d = reference.values[i] - candidate.values[i];
    s += d * d;
  }
  QualityScore q;
  q.mse = s / static_cast<double>(reference.values.size());
  q.psnr_db = psnr_from_mse(q.mse);
  return q;
}

inline TensorMap clamp_unit(const TensorMap& img) {
  TensorMap out = img;
  for (double& v : out.values) v = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
  return out;
}

}  // namespace gradleak::imaging
