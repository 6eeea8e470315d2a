#include "brainseg/rpn.hpp"

#include <algorithm>
#include <numeric>

#include "brainseg/errors.hpp"

namespace brainseg {

using nn::Tensor;
using nn::Var;

std::size_t AnchorLabels::num_positive() const {
  return static_cast<std::size_t>(std::count(p_star.begin(), p_star.end(), std::int8_t{1}));
}

std::size_t AnchorLabels::num_sampled() const {
  return p_star.size() - static_cast<std::size_t>(std::count(p_star.begin(), p_star.end(), kUnsampled));
}

namespace {

/// First `keep` entries of a uniform random permutation of `items`.
std::vector<std::size_t> sample_without_replacement(std::vector<std::size_t> items, std::size_t keep,
                                                    std::mt19937_64& rng) {
  keep = std::min(keep, items.size());
  for (std::size_t i = 0; i < keep; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, items.size() - 1);
    std::swap(items[i], items[pick(rng)]);
  }
  items.resize(keep);
  return items;
}

}  // namespace

AnchorLabels label_anchors(const AnchorSet& anchors, std::span<const Box> gt_boxes, std::size_t sample_size,
                           std::mt19937_64& rng, double iou_threshold,
                           const std::array<double, 4>& delta_std) {
  if (gt_boxes.empty()) throw ValidationError("label_anchors: no ground-truth boxes");
  const std::size_t n = anchors.size();
  const IouMatrix overlaps = iou_matrix(anchors.boxes, gt_boxes);

  std::vector<std::int8_t> label(n, 0);
  std::vector<int> matched(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    double best = -1.0;
    for (std::size_t j = 0; j < gt_boxes.size(); ++j) {
      if (overlaps(i, j) > best) {
        best = overlaps(i, j);
        matched[i] = static_cast<int>(j);
      }
    }
    if (best >= iou_threshold) label[i] = 1;
  }
  // Best anchor(s) of each ground-truth box, so that none goes unmatched.
  for (std::size_t j = 0; j < gt_boxes.size(); ++j) {
    double best = 0.0;
    for (std::size_t i = 0; i < n; ++i) best = std::max(best, overlaps(i, j));
    if (best <= 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      if (overlaps(i, j) == best && label[i] != 1) {
        label[i] = 1;
        matched[i] = static_cast<int>(j);
      }
    }
  }

  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < n; ++i) (label[i] == 1 ? pos : neg).push_back(i);
  pos = sample_without_replacement(std::move(pos), sample_size / 2, rng);
  neg = sample_without_replacement(std::move(neg), sample_size - pos.size(), rng);

  AnchorLabels out;
  out.p_star.assign(n, AnchorLabels::kUnsampled);
  out.q_star.assign(n, BoxDelta{});
  out.matched_gt.assign(n, -1);
  for (std::size_t i : neg) out.p_star[i] = 0;
  for (std::size_t i : pos) {
    out.p_star[i] = 1;
    out.matched_gt[i] = matched[i];
    const BoxDelta d = encode_deltas(anchors.boxes[i], gt_boxes[matched[i]]);
    out.q_star[i] = {d.dy / delta_std[0], d.dx / delta_std[1], d.dh / delta_std[2], d.dw / delta_std[3]};
  }
  return out;
}

template <typename T>
RpnHead<T>::RpnHead(int in_channels, int anchors_per_location, double init_gain,
                    nn::ParameterStore<T>& store, std::mt19937_64& rng)
    : anchors_(anchors_per_location) {
  if (anchors_ < 1) throw ConfigError("rpn: need at least one anchor per location");
  conv_w_ = store.add("rpn.conv.weight", {in_channels, in_channels, 3, 3});
  conv_b_ = store.add("rpn.conv.bias", {in_channels});
  cls_w_ = store.add("rpn.cls.weight", {2 * anchors_, in_channels, 1, 1});
  cls_b_ = store.add("rpn.cls.bias", {2 * anchors_});
  box_w_ = store.add("rpn.bbox.weight", {4 * anchors_, in_channels, 1, 1});
  box_b_ = store.add("rpn.bbox.bias", {4 * anchors_});
  nn::init_uniform(conv_w_.mutable_value(), in_channels * 9, init_gain * nn::role_gain(nn::InitRole::kRelu), rng);
  const double predictor = init_gain * nn::role_gain(nn::InitRole::kPredictor);
  nn::init_uniform(cls_w_.mutable_value(), in_channels, predictor, rng);
  nn::init_uniform(box_w_.mutable_value(), in_channels, predictor, rng);
}

template <typename T>
RpnPrediction<T> RpnHead<T>::forward(const PyramidFeatures<T>& pyramid) const {
  std::vector<Var<T>> logits, deltas;
  for (const auto& level : pyramid.levels) {
    const Var<T> shared = nn::relu(nn::conv2d(level, conv_w_, conv_b_, 1, 1));
    logits.push_back(nn::anchor_rows(nn::conv2d(shared, cls_w_, cls_b_, 1, 0), 2));
    deltas.push_back(nn::anchor_rows(nn::conv2d(shared, box_w_, box_b_, 1, 0), 4));
  }
  return {nn::softmax_rows(nn::concat_rows(logits)), nn::concat_rows(deltas)};
}

template <typename T>
RpnPrediction<T> rpn_forward(const RpnHead<T>& head, const PyramidFeatures<T>& pyramid,
                             const AnchorSet& anchors) {
  const auto shapes = pyramid.shapes();
  bool match = shapes.size() == anchors.shapes.size() && anchors.ratios_per_location == head.anchors_per_location();
  for (std::size_t l = 0; match && l < shapes.size(); ++l) {
    match = shapes[l].height == anchors.shapes[l].height && shapes[l].width == anchors.shapes[l].width &&
            pyramid.strides[l] == anchors.strides[l];
  }
  if (!match) throw ValidationError("rpn_forward: anchor grid does not match the feature pyramid");
  return head.forward(pyramid);
}

template <typename T>
Proposals generate_proposals(const RpnPrediction<T>& pred, const AnchorSet& anchors, int image_h, int image_w,
                             std::size_t pre_nms_top, std::size_t post_nms_top, double nms_threshold,
                             const std::array<double, 4>& delta_std) {
  const std::size_t n = anchors.size();
  if (pred.objectness.shape() != nn::Shape{static_cast<int>(n), 2} ||
      pred.deltas.shape() != nn::Shape{static_cast<int>(n), 4}) {
    throw ValidationError("generate_proposals: prediction rows do not match " + std::to_string(n) + " anchors");
  }
  const Tensor<T>& prob = pred.objectness.value();
  const Tensor<T>& del = pred.deltas.value();

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t top = std::min(pre_nms_top, n);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return prob[2 * a + 1] > prob[2 * b + 1] || (prob[2 * a + 1] == prob[2 * b + 1] && a < b);
                    });
  order.resize(top);

  std::vector<Box> boxes;
  std::vector<double> scores;
  boxes.reserve(top);
  for (std::size_t i : order) {
    const BoxDelta d{del[4 * i] * delta_std[0], del[4 * i + 1] * delta_std[1], del[4 * i + 2] * delta_std[2],
                     del[4 * i + 3] * delta_std[3]};
    boxes.push_back(decode_deltas(anchors.boxes[i], d));
    scores.push_back(prob[2 * i + 1]);
  }
  boxes = sanitize_boxes(boxes, image_h, image_w, false);
  const auto keep = nms(boxes, scores, nms_threshold, post_nms_top);

  Proposals out;
  for (std::size_t k : keep) {
    out.boxes.push_back(normalize_box(boxes[k], image_h, image_w));
    out.scores.push_back(scores[k]);
  }
  return out;
}

template <typename T>
RpnLoss<T> rpn_loss(const RpnPrediction<T>& pred, const AnchorLabels& labels, const LossConfig& cfg) {
  const std::size_t n = labels.p_star.size();
  if (pred.objectness.shape() != nn::Shape{static_cast<int>(n), 2}) {
    throw ValidationError("rpn_loss: objectness shape " + nn::shape_str(pred.objectness.shape()) +
                          " does not match " + std::to_string(n) + " labels");
  }
  std::vector<std::int64_t> cls_idx, reg_idx;
  std::vector<int> cls_labels;
  std::vector<T> targets;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels.p_star[i] == AnchorLabels::kUnsampled) continue;
    cls_idx.push_back(static_cast<std::int64_t>(2 * i));
    cls_idx.push_back(static_cast<std::int64_t>(2 * i + 1));
    cls_labels.push_back(labels.p_star[i]);
    if (labels.p_star[i] == 1) {
      for (int c = 0; c < 4; ++c) reg_idx.push_back(static_cast<std::int64_t>(4 * i + c));
      const BoxDelta& q = labels.q_star[i];
      targets.insert(targets.end(), {static_cast<T>(q.dy), static_cast<T>(q.dx), static_cast<T>(q.dh),
                                     static_cast<T>(q.dw)});
    }
  }
  const int n_sampled = static_cast<int>(cls_labels.size());
  const int n_pos = static_cast<int>(targets.size() / 4);
  if (n_sampled == 0) throw ValidationError("rpn_loss: no sampled anchors");

  RpnLoss<T> out;
  const double n_cls = cfg.n_cls == Normalizer::kCount ? n_sampled : cfg.n_cls_fixed;
  out.cls = nn::cross_entropy(nn::gather(pred.objectness, std::move(cls_idx), {n_sampled, 2}), cls_labels, n_cls);
  if (n_pos > 0) {
    const double n_reg = cfg.n_reg == Normalizer::kCount ? n_pos : cfg.n_reg_fixed;
    const Var<T> picked = nn::gather(pred.deltas, std::move(reg_idx), {n_pos, 4});
    out.reg = nn::scale(nn::smooth_l1(picked, Tensor<T>({n_pos, 4}, std::move(targets)), n_reg), cfg.mu);
  } else {
    out.reg = nn::constant(Tensor<T>({1}, T{0}));
  }
  out.total = nn::add(out.cls, out.reg);
  return out;
}

#define BRAINSEG_INSTANTIATE_RPN(T)                                                                      \
  template class RpnHead<T>;                                                                             \
  template RpnPrediction<T> rpn_forward<T>(const RpnHead<T>&, const PyramidFeatures<T>&, const AnchorSet&); \
  template Proposals generate_proposals<T>(const RpnPrediction<T>&, const AnchorSet&, int, int, std::size_t, \
                                           std::size_t, double, const std::array<double, 4>&);          \
  template RpnLoss<T> rpn_loss<T>(const RpnPrediction<T>&, const AnchorLabels&, const LossConfig&);

BRAINSEG_INSTANTIATE_RPN(float)
BRAINSEG_INSTANTIATE_RPN(double)

}  // namespace brainseg
