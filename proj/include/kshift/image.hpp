#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace kshift {

/// What the values of an image mean.
enum class Intensity { raw, hounsfield, normalized };

/// Row-major 2D grid of real values with physical pixel spacing in mm.
struct Image2D {
  std::size_t rows = 0;
  std::size_t cols = 0;
  double spacing_mm = 1.0;
  std::vector<double> data;
  Intensity intensity = Intensity::raw;

  Image2D() = default;
  Image2D(std::size_t r, std::size_t c, double spacing = 1.0, double fill = 0.0)
      : rows(r), cols(c), spacing_mm(spacing), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool square() const { return rows == cols; }
  double pixel_area() const { return spacing_mm * spacing_mm; }
};

/// Binary mask on the same grid as an Image2D. Values are 0 or 1.
struct Mask2D {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> data;

  Mask2D() = default;
  Mask2D(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0) {}

  std::uint8_t& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  std::uint8_t operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += v != 0;
    return n;
  }
  bool any() const { return count() > 0; }
};

/// True when every value is finite.
bool all_finite(std::span<const double> values);

}  // namespace kshift
