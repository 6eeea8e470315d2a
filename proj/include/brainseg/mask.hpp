#pragma once

#include <cstdint>
#include <vector>

#include "brainseg/geometry.hpp"

namespace brainseg {

/// Binary raster, row-major, one byte per pixel (0 or 1).
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }

  std::size_t count() const;
  bool empty() const { return count() == 0; }
  /// Tight pixel box [y1,x1,y2,x2) around the set pixels; all zeros if empty.
  Box bounding_box() const;

  friend bool operator==(const Mask&, const Mask&) = default;
};

}  // namespace brainseg
