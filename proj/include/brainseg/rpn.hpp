#pragma once

// Region proposal network: anchor labeling, the sliding-window head,
// proposal generation and the two-term proposal loss.

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "brainseg/backbone.hpp"
#include "brainseg/config.hpp"
#include "brainseg/geometry.hpp"
#include "brainseg/nn/ops.hpp"
#include "brainseg/nn/parameters.hpp"

namespace brainseg {

inline constexpr std::array<double, 4> kUnitDeltaStd{1.0, 1.0, 1.0, 1.0};

struct AnchorLabels {
  static constexpr std::int8_t kUnsampled = -1;

  std::vector<std::int8_t> p_star;  // 1 positive, 0 negative, kUnsampled
  std::vector<BoxDelta> q_star;     // regression target, set for positives
  std::vector<int> matched_gt;      // ground-truth index for positives, else -1

  std::size_t num_positive() const;
  std::size_t num_sampled() const;
};

/// IoU >= `iou_threshold` is positive, below it negative; in addition every
/// anchor attaining a ground-truth box's best IoU is forced positive. Then at
/// most sample_size/2 positives and enough negatives to reach `sample_size`
/// are drawn uniformly; the rest become unsampled. Targets are divided
/// component-wise by `delta_std`.
AnchorLabels label_anchors(const AnchorSet& anchors, std::span<const Box> gt_boxes,
                           std::size_t sample_size, std::mt19937_64& rng,
                           double iou_threshold = 0.5,
                           const std::array<double, 4>& delta_std = kUnitDeltaStd);

template <typename T>
struct RpnPrediction {
  nn::Var<T> objectness;  // [N,2] softmax probabilities; column 1 is "object"
  nn::Var<T> deltas;      // [N,4] as (dy, dx, dh, dw)
};

template <typename T>
class RpnHead {
 public:
  RpnHead(int in_channels, int anchors_per_location, double init_gain, nn::ParameterStore<T>& store,
          std::mt19937_64& rng);

  /// Shared 3x3 conv + relu, then 1x1 objectness and delta convs on every
  /// level; rows follow the anchor order of generate_anchors.
  RpnPrediction<T> forward(const PyramidFeatures<T>& pyramid) const;

  int anchors_per_location() const { return anchors_; }

 private:
  int anchors_;
  nn::Var<T> conv_w_, conv_b_, cls_w_, cls_b_, box_w_, box_b_;
};

/// forward() after checking that `anchors` was generated for this pyramid.
template <typename T>
RpnPrediction<T> rpn_forward(const RpnHead<T>& head, const PyramidFeatures<T>& pyramid,
                             const AnchorSet& anchors);

struct Proposals {
  std::vector<Box> boxes;  // normalized
  std::vector<double> scores;
};

/// Top `pre_nms_top` anchors by objectness, decoded, clipped to the image,
/// suppressed at `nms_threshold`, capped at `post_nms_top`, then normalized.
template <typename T>
Proposals generate_proposals(const RpnPrediction<T>& pred, const AnchorSet& anchors, int image_h,
                             int image_w, std::size_t pre_nms_top, std::size_t post_nms_top,
                             double nms_threshold,
                             const std::array<double, 4>& delta_std = kUnitDeltaStd);

template <typename T>
struct RpnLoss {
  nn::Var<T> total;  // cls + mu * reg
  nn::Var<T> cls;
  nn::Var<T> reg;
};

/// Two-way cross-entropy over sampled anchors / n_cls plus mu times
/// smooth-L1 over positive anchors / n_reg. Throws ValidationError when no
/// anchor is sampled.
template <typename T>
RpnLoss<T> rpn_loss(const RpnPrediction<T>& pred, const AnchorLabels& labels, const LossConfig& cfg);

}  // namespace brainseg
