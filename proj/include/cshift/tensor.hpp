#pragma once

#include <algorithm>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cshift {

/// Channel-major image shape (C x H x W).
struct Shape {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;

  [[nodiscard]] constexpr std::size_t size() const { return channels * height * width; }
  [[nodiscard]] constexpr std::size_t plane() const { return height * width; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << s.channels << "x" << s.height << "x" << s.width;
  return os.str();
}

/// C x H x W image stored row-major per channel. Clean data lives in [0, 1];
/// noisy or adversarial intermediates may leave that range.
struct ImageTensor {
  Shape shape;
  std::vector<double> data;

  ImageTensor() = default;
  explicit ImageTensor(Shape s, double fill = 0.0) : shape(s), data(s.size(), fill) {}
  ImageTensor(Shape s, std::vector<double> values) : shape(s), data(std::move(values)) {
    if (data.size() != shape.size()) {
      throw std::invalid_argument("image data length " + std::to_string(data.size()) +
                                  " does not match shape " + to_string(shape));
    }
  }

  [[nodiscard]] std::size_t size() const { return data.size(); }

  double& at(std::size_t c, std::size_t i, std::size_t j) {
    return data[(c * shape.height + i) * shape.width + j];
  }
  [[nodiscard]] double at(std::size_t c, std::size_t i, std::size_t j) const {
    return data[(c * shape.height + i) * shape.width + j];
  }

  void clamp_unit() {
    for (double& v : data) v = std::clamp(v, 0.0, 1.0);
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

}  // namespace cshift
