#pragma once

// Axis-aligned box arithmetic shared by the proposal, detection and
// evaluation stages.
//
// Boxes are stored in corner form (y1, x1, y2, x2) with continuous
// coordinates and an inclusive-exclusive extent, so a box covering pixel
// rows 0..9 is [0, 10). The same type carries pixel coordinates and
// coordinates normalized by the image extent.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace brainseg {

struct Box {
  double y1 = 0.0;
  double x1 = 0.0;
  double y2 = 0.0;
  double x2 = 0.0;

  double height() const { return y2 - y1; }
  double width() const { return x2 - x1; }
  double area() const { return height() * width(); }
  double center_y() const { return y1 + 0.5 * height(); }
  double center_x() const { return x1 + 0.5 * width(); }
  bool valid() const { return y2 >= y1 && x2 >= x1; }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Regression offsets of a target box relative to a reference (anchor or
/// RoI): center shifts in units of the reference extent, log size ratios.
struct BoxDelta {
  double dy = 0.0;
  double dx = 0.0;
  double dh = 0.0;
  double dw = 0.0;

  friend bool operator==(const BoxDelta&, const BoxDelta&) = default;
};

/// Bound applied to |dh| and |dw| before exponentiation.
inline const double kDeltaClamp = std::log(1000.0 / 16.0);

struct FeatureShape {
  int height = 0;
  int width = 0;
};

/// Anchor grid over all pyramid levels, ordered level-major, then
/// row-major over feature cells, ratio-minor.
struct AnchorSet {
  std::vector<Box> boxes;
  std::vector<int> level;            // per anchor
  std::vector<int> strides;          // per level
  std::vector<FeatureShape> shapes;  // per level
  int ratios_per_location = 0;

  std::size_t size() const { return boxes.size(); }
  /// Index of the first anchor belonging to `lvl`.
  std::size_t level_offset(int lvl) const;
};

/// Dense row-major IoU matrix.
struct IouMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

/// Throws ValidationError for y2 < y1, x2 < x1 or non-finite coordinates.
void validate_box(const Box& box);

double iou(const Box& a, const Box& b);
IouMatrix iou_matrix(std::span<const Box> a, std::span<const Box> b);

BoxDelta encode_deltas(const Box& anchor, const Box& target);
Box decode_deltas(const Box& anchor, const BoxDelta& delta, double clamp = kDeltaClamp);

/// Greedy suppression. Returns kept indices in descending score order
/// (ties resolved by lower index); a box is suppressed when its IoU with an
/// already kept box exceeds `iou_threshold`.
std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores,
                             double iou_threshold, std::size_t cap);

/// One scale per level; every location gets one anchor per ratio, with
/// h = scale * sqrt(r), w = scale / sqrt(r) (area preserved).
AnchorSet generate_anchors(std::span<const FeatureShape> feature_shapes,
                           std::span<const int> strides, std::span<const double> scales,
                           std::span<const double> ratios);

/// Clip to [0,H]x[0,W]; with `normalize`, also divide by (H, W).
std::vector<Box> sanitize_boxes(std::span<const Box> boxes, double image_h, double image_w,
                                bool normalize);

Box normalize_box(const Box& box, double image_h, double image_w);
Box denormalize_box(const Box& box, double image_h, double image_w);

}  // namespace brainseg
