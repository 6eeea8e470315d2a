#include "brainseg/mask.hpp"

#include <algorithm>

namespace brainseg {

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

Box Mask::bounding_box() const {
  int y1 = height, x1 = width, y2 = -1, x2 = -1;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      if (!at(y, x)) continue;
      y1 = std::min(y1, y);
      y2 = std::max(y2, y);
      x1 = std::min(x1, x);
      x2 = std::max(x2, x);
    }
  }
  if (y2 < 0) return {};
  return {static_cast<double>(y1), static_cast<double>(x1), static_cast<double>(y2 + 1), static_cast<double>(x2 + 1)};
}

}  // namespace brainseg
