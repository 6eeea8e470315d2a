#include "brainseg/model.hpp"

#include <algorithm>

#include "brainseg/errors.hpp"

namespace brainseg {

using nn::Tensor;
using nn::Var;

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed)
    : config_(config), params_(std::make_unique<nn::ParameterStore<T>>()) {
  config_.validate();
  std::mt19937_64 rng(seed);
  backbone_ = std::make_unique<Backbone<T>>(config_.backbone, *params_, rng);
  rpn_ = std::make_unique<RpnHead<T>>(config_.backbone.fpn_channels, static_cast<int>(config_.anchor_ratios.size()),
                                      config_.backbone.init_gain, *params_, rng);
  heads_ = std::make_unique<RoiHeads<T>>(config_, *params_, rng);
}

template <typename T>
Var<T> Model<T>::normalize_image(const Tensor<float>& image) const {
  Tensor<T> x(image.shape());
  const double mean = config_.pixel_mean, inv = 1.0 / config_.pixel_scale;
  for (std::size_t i = 0; i < image.size(); ++i) x[i] = static_cast<T>((image[i] - mean) * inv);
  return nn::constant(std::move(x));
}

template <typename T>
AnchorSet Model<T>::anchors_for(const PyramidFeatures<T>& pyramid) const {
  const auto shapes = pyramid.shapes();
  return generate_anchors(shapes, pyramid.strides, config_.anchor_scales, config_.anchor_ratios);
}

template <typename T>
TrainingLoss<T> Model<T>::training_loss(const TrainingExample& ex, const LossConfig& loss_cfg,
                                        std::mt19937_64& rng) const {
  if (ex.boxes.empty()) throw ValidationError("training_loss: example has no instances");
  if (ex.image.rank() != 3) throw ValidationError("training_loss: image must be [3,H,W]");
  const int h = ex.image.dim(1), w = ex.image.dim(2);

  const PyramidFeatures<T> pyramid = backbone_->extract_pyramid(normalize_image(ex.image));
  const AnchorSet anchors = anchors_for(pyramid);
  const RpnPrediction<T> pred = rpn_forward(*rpn_, pyramid, anchors);
  const auto std4 = config_.delta_std();
  const AnchorLabels labels = label_anchors(anchors, ex.boxes, static_cast<std::size_t>(config_.rpn_sample_size),
                                            rng, config_.rpn_iou_threshold, std4);
  const RpnLoss<T> rpn_l = rpn_loss(pred, labels, loss_cfg);

  const Proposals proposals = generate_proposals(pred, anchors, h, w, config_.train_pre_nms, config_.train_post_nms,
                                                 config_.rpn_nms_threshold, std4);
  GroundTruth gt;
  for (const Box& b : ex.boxes) gt.boxes.push_back(normalize_box(b, h, w));
  gt.class_ids = ex.class_ids;
  gt.masks = ex.masks;
  const RoiTargets targets = build_roi_targets(proposals.boxes, gt, config_, rng);

  HeadOutputs<T> out;
  heads_->classify(roi_align(pyramid, targets.rois, config_.pool_size), out);
  const int n_pos = targets.num_positive();
  if (n_pos > 0) {
    const std::span<const Box> positives(targets.rois.data(), static_cast<std::size_t>(n_pos));
    out.masks = heads_->predict_masks(roi_align(pyramid, positives, config_.mask_pool_size));
  }
  const HeadLoss<T> head_l = multitask_loss(out, targets, loss_cfg);

  TrainingLoss<T> result;
  result.total = nn::add(rpn_l.total, head_l.total);
  result.values = {rpn_l.cls.value()[0],  rpn_l.reg.value()[0],  head_l.cls.value()[0],
                   head_l.reg.value()[0], head_l.mask.value()[0], result.total.value()[0]};
  return result;
}

template <typename T>
std::vector<Detection> Model<T>::detect(const Tensor<float>& image) const {
  if (image.rank() != 3 || image.dim(0) != 3) throw ValidationError("detect: image must be [3,H,W]");
  nn::NoGradGuard no_grad;
  const int h = image.dim(1), w = image.dim(2);
  const int top = config_.backbone.top_stride();
  const int ph = (h + top - 1) / top * top, pw = (w + top - 1) / top * top;
  Tensor<float> padded({3, ph, pw});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      std::copy_n(image.data() + (static_cast<std::size_t>(c) * h + y) * w, w,
                  padded.data() + (static_cast<std::size_t>(c) * ph + y) * pw);
    }
  }

  const PyramidFeatures<T> pyramid = backbone_->extract_pyramid(normalize_image(padded));
  const AnchorSet anchors = anchors_for(pyramid);
  const RpnPrediction<T> pred = rpn_forward(*rpn_, pyramid, anchors);
  const Proposals proposals = generate_proposals(pred, anchors, ph, pw, config_.infer_pre_nms,
                                                 config_.infer_post_nms, config_.rpn_nms_threshold,
                                                 config_.delta_std());
  if (proposals.boxes.empty()) return {};

  HeadOutputs<T> out;
  heads_->classify(roi_align(pyramid, proposals.boxes, config_.pool_size), out);
  const auto candidates = select_detections(out.class_probs.value(), out.deltas.value(), proposals.boxes, config_);
  if (candidates.empty()) return {};

  std::vector<Box> boxes;
  for (const auto& c : candidates) boxes.push_back(c.box);
  const Var<T> masks = heads_->predict_masks(roi_align(pyramid, boxes, config_.mask_pool_size));
  const int m = config_.mask_size, fg = config_.foreground_classes();
  const std::size_t area = static_cast<std::size_t>(m) * m;

  std::vector<Detection> result;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Candidate& c = candidates[i];
    const T* p = masks.value().data() + (i * fg + (c.class_id - 1)) * area;
    const Mask full = paste_mask(std::span<const T>(p, area), m, c.box, ph, pw, config_.mask_threshold);
    Detection d;
    d.class_id = c.class_id;
    d.score = c.score;
    d.mask = Mask(h, w);
    for (int y = 0; y < h; ++y) std::copy_n(&full.bits[static_cast<std::size_t>(y) * pw], w, &d.mask.bits[static_cast<std::size_t>(y) * w]);
    if (d.mask.empty()) continue;
    const Box px = sanitize_boxes(std::vector<Box>{denormalize_box(c.box, ph, pw)}, h, w, false)[0];
    d.box = normalize_box(px, h, w);
    result.push_back(std::move(d));
  }
  return result;
}

template class Model<float>;
template class Model<double>;

}  // namespace brainseg
