#include "brainseg/geometry.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "brainseg/errors.hpp"

namespace brainseg {

namespace {

std::string describe(const Box& b) {
  std::ostringstream os;
  os << "[" << b.y1 << ", " << b.x1 << ", " << b.y2 << ", " << b.x2 << "]";
  return os.str();
}

}  // namespace

std::size_t AnchorSet::level_offset(int lvl) const {
  std::size_t offset = 0;
  for (int l = 0; l < lvl; ++l) {
    offset += static_cast<std::size_t>(shapes[l].height) * shapes[l].width * ratios_per_location;
  }
  return offset;
}

void validate_box(const Box& box) {
  if (!std::isfinite(box.y1) || !std::isfinite(box.x1) || !std::isfinite(box.y2) ||
      !std::isfinite(box.x2)) {
    throw ValidationError("box has non-finite coordinates: " + describe(box));
  }
  if (!box.valid()) {
    throw ValidationError("malformed box (y2<y1 or x2<x1): " + describe(box));
  }
}

double iou(const Box& a, const Box& b) {
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  if (ih <= 0.0 || iw <= 0.0) return 0.0;
  const double inter = ih * iw;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

IouMatrix iou_matrix(std::span<const Box> a, std::span<const Box> b) {
  for (const Box& box : a) validate_box(box);
  for (const Box& box : b) validate_box(box);
  IouMatrix m;
  m.rows = a.size();
  m.cols = b.size();
  m.values.resize(m.rows * m.cols);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) m.values[i * m.cols + j] = iou(a[i], b[j]);
  }
  return m;
}

BoxDelta encode_deltas(const Box& anchor, const Box& target) {
  const double ha = anchor.height();
  const double wa = anchor.width();
  if (!(ha > 0.0) || !(wa > 0.0)) {
    throw ValidationError("encode_deltas: anchor has zero extent " + describe(anchor));
  }
  const double ht = target.height();
  const double wt = target.width();
  if (!(ht > 0.0) || !(wt > 0.0)) {
    throw ValidationError("encode_deltas: target has zero extent " + describe(target));
  }
  return {(target.center_y() - anchor.center_y()) / ha, (target.center_x() - anchor.center_x()) / wa,
          std::log(ht / ha), std::log(wt / wa)};
}

Box decode_deltas(const Box& anchor, const BoxDelta& delta, double clamp) {
  const double ha = anchor.height();
  const double wa = anchor.width();
  const double cy = anchor.center_y() + delta.dy * ha;
  const double cx = anchor.center_x() + delta.dx * wa;
  const double h = ha * std::exp(std::clamp(delta.dh, -clamp, clamp));
  const double w = wa * std::exp(std::clamp(delta.dw, -clamp, clamp));
  return {cy - 0.5 * h, cx - 0.5 * w, cy + 0.5 * h, cx + 0.5 * w};
}

std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores,
                             double iou_threshold, std::size_t cap) {
  if (boxes.size() != scores.size()) {
    throw ValidationError("nms: boxes and scores differ in length");
  }
  if (iou_threshold < 0.0 || iou_threshold > 1.0) {
    throw ValidationError("nms: iou_threshold outside [0, 1]");
  }
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return scores[i] > scores[j]; });

  std::vector<std::size_t> keep;
  std::vector<char> suppressed(boxes.size(), 0);
  for (std::size_t oi = 0; oi < order.size() && keep.size() < cap; ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou(boxes[i], boxes[j]) > iou_threshold) suppressed[j] = 1;
    }
  }
  return keep;
}

AnchorSet generate_anchors(std::span<const FeatureShape> feature_shapes,
                           std::span<const int> strides, std::span<const double> scales,
                           std::span<const double> ratios) {
  if (feature_shapes.size() != strides.size() || strides.size() != scales.size()) {
    throw ConfigError("generate_anchors: feature shapes, strides and scales need one entry per level");
  }
  if (ratios.empty()) throw ConfigError("generate_anchors: at least one aspect ratio required");
  for (double r : ratios) {
    if (!(r > 0.0)) throw ConfigError("generate_anchors: aspect ratios must be positive");
  }

  AnchorSet set;
  set.strides.assign(strides.begin(), strides.end());
  set.shapes.assign(feature_shapes.begin(), feature_shapes.end());
  set.ratios_per_location = static_cast<int>(ratios.size());

  std::size_t total = 0;
  for (const auto& s : feature_shapes) total += static_cast<std::size_t>(s.height) * s.width;
  set.boxes.reserve(total * ratios.size());
  set.level.reserve(total * ratios.size());

  for (std::size_t l = 0; l < feature_shapes.size(); ++l) {
    const double stride = strides[l];
    for (int i = 0; i < feature_shapes[l].height; ++i) {
      for (int j = 0; j < feature_shapes[l].width; ++j) {
        const double cy = (i + 0.5) * stride;
        const double cx = (j + 0.5) * stride;
        for (double r : ratios) {
          const double h = scales[l] * std::sqrt(r);
          const double w = scales[l] / std::sqrt(r);
          set.boxes.push_back({cy - 0.5 * h, cx - 0.5 * w, cy + 0.5 * h, cx + 0.5 * w});
          set.level.push_back(static_cast<int>(l));
        }
      }
    }
  }
  return set;
}

std::vector<Box> sanitize_boxes(std::span<const Box> boxes, double image_h, double image_w,
                                bool normalize) {
  if (!(image_h > 0.0) || !(image_w > 0.0)) {
    throw ValidationError("sanitize_boxes: image extent must be positive");
  }
  std::vector<Box> out;
  out.reserve(boxes.size());
  for (const Box& b : boxes) {
    Box c{std::clamp(b.y1, 0.0, image_h), std::clamp(b.x1, 0.0, image_w),
          std::clamp(b.y2, 0.0, image_h), std::clamp(b.x2, 0.0, image_w)};
    out.push_back(normalize ? normalize_box(c, image_h, image_w) : c);
  }
  return out;
}

Box normalize_box(const Box& box, double image_h, double image_w) {
  return {box.y1 / image_h, box.x1 / image_w, box.y2 / image_h, box.x2 / image_w};
}

Box denormalize_box(const Box& box, double image_h, double image_w) {
  return {box.y1 * image_h, box.x1 * image_w, box.y2 * image_h, box.x2 * image_w};
}

}  // namespace brainseg
