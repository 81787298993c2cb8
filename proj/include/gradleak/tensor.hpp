#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gradleak {

using Vector = std::vector<double>;

struct Shape3 {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return channels * height * width; }
  bool operator==(const Shape3&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << channels << "x" << height << "x" << width;
    return os.str();
  }
};

// Multi-channel spatial array. Storage is channel-major, then row-major:
// index(c, y, x) = c*h*w + y*w + x. Every vectorized operator in the library
// uses this order.
struct TensorMap {
  Shape3 shape;
  Vector values;

  TensorMap() = default;
  explicit TensorMap(Shape3 s) : shape(s), values(s.size(), 0.0) {}
  TensorMap(Shape3 s, Vector v) : shape(s), values(std::move(v)) {
    if (values.size() != shape.size()) {
      throw std::invalid_argument("TensorMap: " + std::to_string(values.size()) +
                                  " values do not fit shape " + shape.str());
    }
  }

  std::size_t index(std::size_t c, std::size_t y, std::size_t x) const {
    return (c * shape.height + y) * shape.width + x;
  }
  double& at(std::size_t c, std::size_t y, std::size_t x) { return values[index(c, y, x)]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return values[index(c, y, x)]; }
};

}  // namespace gradleak
