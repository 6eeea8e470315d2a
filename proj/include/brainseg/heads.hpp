#pragma once

// RoI pooling, the classifier / box / mask heads, their training targets and
// loss, and conversion of head outputs into final detections.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "brainseg/backbone.hpp"
#include "brainseg/config.hpp"
#include "brainseg/mask.hpp"
#include "brainseg/nn/ops.hpp"
#include "brainseg/nn/parameters.hpp"
#include "brainseg/rpn.hpp"

namespace brainseg {

/// Pools each normalized RoI from its assigned pyramid level into an
/// out_size x out_size grid, sampling every cell once at its center by
/// bilinear interpolation. Feature cell j of a stride-s level is centered at
/// image coordinate (j + 0.5) * s; samples outside the map are clamped to
/// its border. Returns [n, C, out_size, out_size].
template <typename T>
nn::Var<T> roi_align(const PyramidFeatures<T>& pyramid, std::span<const Box> rois, int out_size);

template <typename T>
struct HeadOutputs {
  nn::Var<T> class_probs;  // [n, K]
  nn::Var<T> deltas;       // [n, (K-1)*4], foreground classes only
  nn::Var<T> masks;        // [n_mask, K-1, m, m] sigmoid probabilities
};

template <typename T>
class RoiHeads {
 public:
  RoiHeads(const ModelConfig& config, nn::ParameterStore<T>& store, std::mt19937_64& rng);

  /// Two hidden dense layers over the flattened pooled features, then a
  /// softmax classifier and a per-class box regressor.
  void classify(const nn::Var<T>& pooled, HeadOutputs<T>& out) const;
  /// 3x3 conv stack, nearest 2x upsampling, one more 3x3 conv, then a 1x1
  /// conv with per-class sigmoid outputs.
  nn::Var<T> predict_masks(const nn::Var<T>& pooled) const;

 private:
  int classes_;
  int pool_;
  int mask_pool_;
  int channels_;
  std::vector<nn::Var<T>> fc_w_, fc_b_;
  nn::Var<T> cls_w_, cls_b_, box_w_, box_b_;
  std::vector<nn::Var<T>> mask_w_, mask_b_;
  nn::Var<T> mask_out_w_, mask_out_b_;
};

template <typename T>
HeadOutputs<T> heads_forward(const RoiHeads<T>& heads, const nn::Var<T>& pooled, const nn::Var<T>& mask_pooled);

struct GroundTruth {
  std::vector<Box> boxes;  // normalized
  std::vector<int> class_ids;  // 1..K-1
  std::vector<Mask> masks;     // full image resolution
};

/// Sampled RoIs with their targets. Positives come first.
struct RoiTargets {
  std::vector<Box> rois;           // normalized
  std::vector<int> labels;         // 0 = background
  std::vector<BoxDelta> deltas;    // per positive, divided by delta_std
  std::vector<std::vector<float>> masks;  // per positive, m*m binary values
  int mask_size = 0;

  int num_positive() const { return static_cast<int>(deltas.size()); }
};

/// Matches proposals (plus the ground-truth boxes when configured) to ground
/// truth at roi_iou_threshold and samples roi_sample_size RoIs with at most
/// roi_positive_fraction positives. Mask targets are the matched mask
/// cropped to the RoI, bilinearly resampled to m x m and thresholded at 0.5.
RoiTargets build_roi_targets(std::span<const Box> proposals, const GroundTruth& gt, const ModelConfig& config,
                             std::mt19937_64& rng);

template <typename T>
struct HeadLoss {
  nn::Var<T> total;
  nn::Var<T> cls;
  nn::Var<T> reg;
  nn::Var<T> mask;
};

/// L = w_cls*L_cls + w_reg*L_reg + w_mask*L_mask. Only the first
/// num_positive rows of `out.masks` are read.
template <typename T>
HeadLoss<T> multitask_loss(const HeadOutputs<T>& out, const RoiTargets& targets, const LossConfig& cfg);

struct Detection {
  int class_id = 0;
  double score = 0.0;
  Box box;    // normalized
  Mask mask;  // full image resolution
};

struct Candidate {
  std::size_t roi = 0;
  int class_id = 0;
  double score = 0.0;
  Box box;  // refined, normalized
};

/// Argmax foreground class per RoI, box refined by that class's deltas,
/// scores below the threshold dropped, best per class kept, at most
/// max_detections by descending score.
template <typename T>
std::vector<Candidate> select_detections(const nn::Tensor<T>& class_probs, const nn::Tensor<T>& deltas,
                                         std::span<const Box> rois, const ModelConfig& config);

/// Resamples an m x m probability map bilinearly onto the pixels whose
/// centers fall inside `box`, thresholding at `threshold`.
template <typename T>
Mask paste_mask(std::span<const T> mask, int m, const Box& box, int image_h, int image_w, double threshold);

/// Full post-processing when masks were predicted for every RoI. Candidates
/// whose pasted mask is empty are dropped.
template <typename T>
std::vector<Detection> detection_postprocess(const nn::Tensor<T>& class_probs, const nn::Tensor<T>& deltas,
                                             const nn::Tensor<T>& masks, std::span<const Box> rois, int image_h,
                                             int image_w, const ModelConfig& config);

}  // namespace brainseg
