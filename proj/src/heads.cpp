#include "brainseg/heads.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>

#include "brainseg/errors.hpp"

namespace brainseg {

using nn::Shape;
using nn::Tensor;
using nn::Var;

// ---------------------------------------------------------------- roi_align

namespace {

/// Bilinear taps of one sample: four flat offsets into a feature plane.
template <typename T>
struct Taps {
  int level = 0;
  std::int64_t index[4] = {0, 0, 0, 0};
  T weight[4] = {0, 0, 0, 0};
};

/// Linear interpolation position on an axis of `extent` cells, clamped.
inline void axis_taps(double u, int extent, int& i0, int& i1, double& frac) {
  u = std::clamp(u, 0.0, static_cast<double>(extent - 1));
  i0 = static_cast<int>(std::floor(u));
  i1 = std::min(i0 + 1, extent - 1);
  frac = u - i0;
}

}  // namespace

template <typename T>
Var<T> roi_align(const PyramidFeatures<T>& pyramid, std::span<const Box> rois, int out_size) {
  if (pyramid.levels.empty()) throw ValidationError("roi_align: empty pyramid");
  if (out_size < 1) throw ValidationError("roi_align: out_size must be positive");
  const int channels = pyramid.levels[0].shape()[0];
  const auto shapes = pyramid.shapes();
  const int image_h = shapes[0].height * pyramid.strides[0];
  const int image_w = shapes[0].width * pyramid.strides[0];
  const int n = static_cast<int>(rois.size());
  const int levels = static_cast<int>(pyramid.levels.size());
  const std::size_t cells = static_cast<std::size_t>(out_size) * out_size;
  if (n == 0) return nn::constant(Tensor<T>({0, channels, out_size, out_size}));

  auto taps = std::make_shared<std::vector<Taps<T>>>(static_cast<std::size_t>(n) * cells);
  for (int r = 0; r < n; ++r) {
    const Box& b = rois[r];
    const int lvl = assign_roi_level(b, image_h, image_w, levels);
    const double stride = pyramid.strides[lvl];
    const int fh = shapes[lvl].height, fw = shapes[lvl].width;
    const double y1 = b.y1 * image_h, x1 = b.x1 * image_w;
    const double ch = b.height() * image_h / out_size, cw = b.width() * image_w / out_size;
    for (int i = 0; i < out_size; ++i) {
      int y0, y1i;
      double fy;
      axis_taps((y1 + (i + 0.5) * ch) / stride - 0.5, fh, y0, y1i, fy);
      for (int j = 0; j < out_size; ++j) {
        int x0, x1i;
        double fx;
        axis_taps((x1 + (j + 0.5) * cw) / stride - 0.5, fw, x0, x1i, fx);
        Taps<T>& t = (*taps)[static_cast<std::size_t>(r) * cells + i * out_size + j];
        t.level = lvl;
        t.index[0] = static_cast<std::int64_t>(y0) * fw + x0;
        t.index[1] = static_cast<std::int64_t>(y0) * fw + x1i;
        t.index[2] = static_cast<std::int64_t>(y1i) * fw + x0;
        t.index[3] = static_cast<std::int64_t>(y1i) * fw + x1i;
        t.weight[0] = static_cast<T>((1 - fy) * (1 - fx));
        t.weight[1] = static_cast<T>((1 - fy) * fx);
        t.weight[2] = static_cast<T>(fy * (1 - fx));
        t.weight[3] = static_cast<T>(fy * fx);
      }
    }
  }

  std::vector<std::size_t> planes(levels);
  for (int l = 0; l < levels; ++l) {
    if (pyramid.levels[l].shape()[0] != channels) throw ValidationError("roi_align: levels differ in channels");
    planes[l] = static_cast<std::size_t>(shapes[l].height) * shapes[l].width;
  }

  Tensor<T> out({n, channels, out_size, out_size});
  for (int r = 0; r < n; ++r) {
    for (std::size_t cell = 0; cell < cells; ++cell) {
      const Taps<T>& t = (*taps)[r * cells + cell];
      const T* f = pyramid.levels[t.level].value().data();
      for (int c = 0; c < channels; ++c) {
        const T* p = f + c * planes[t.level];
        out[(static_cast<std::size_t>(r) * channels + c) * cells + cell] =
            t.weight[0] * p[t.index[0]] + t.weight[1] * p[t.index[1]] + t.weight[2] * p[t.index[2]] +
            t.weight[3] * p[t.index[3]];
      }
    }
  }

  return make_result<T>(std::move(out), pyramid.levels, [taps, planes, n, channels, cells](nn::Node<T>& self) {
    std::vector<T*> grads(self.parents.size(), nullptr);
    for (std::size_t l = 0; l < self.parents.size(); ++l) {
      if (self.parents[l]->requires_grad) grads[l] = self.parents[l]->grad_buffer().data();
    }
    for (int r = 0; r < n; ++r) {
      for (std::size_t cell = 0; cell < cells; ++cell) {
        const Taps<T>& t = (*taps)[r * cells + cell];
        T* g = grads[t.level];
        if (!g) continue;
        for (int c = 0; c < channels; ++c) {
          const T up = self.grad[(static_cast<std::size_t>(r) * channels + c) * cells + cell];
          T* p = g + c * planes[t.level];
          for (int k = 0; k < 4; ++k) p[t.index[k]] += t.weight[k] * up;
        }
      }
    }
  });
}

// ---------------------------------------------------------------- heads

template <typename T>
RoiHeads<T>::RoiHeads(const ModelConfig& config, nn::ParameterStore<T>& store, std::mt19937_64& rng)
    : classes_(config.num_classes),
      pool_(config.pool_size),
      mask_pool_(config.mask_pool_size),
      channels_(config.backbone.fpn_channels) {
  const double gain = config.backbone.init_gain;
  int d_in = channels_ * pool_ * pool_;
  for (int i = 0; i < 2; ++i) {
    const std::string name = "head.fc" + std::to_string(i);
    fc_w_.push_back(store.add(name + ".weight", {d_in, config.head_fc_dim}));
    fc_b_.push_back(store.add(name + ".bias", {config.head_fc_dim}));
    nn::init_uniform(fc_w_.back().mutable_value(), d_in, gain * nn::role_gain(nn::InitRole::kRelu), rng);
    d_in = config.head_fc_dim;
  }
  cls_w_ = store.add("head.cls.weight", {d_in, classes_});
  cls_b_ = store.add("head.cls.bias", {classes_});
  box_w_ = store.add("head.bbox.weight", {d_in, 4 * (classes_ - 1)});
  box_b_ = store.add("head.bbox.bias", {4 * (classes_ - 1)});
  const double predictor = gain * nn::role_gain(nn::InitRole::kPredictor);
  nn::init_uniform(cls_w_.mutable_value(), d_in, predictor, rng);
  nn::init_uniform(box_w_.mutable_value(), d_in, predictor, rng);

  int c_in = channels_;
  for (int i = 0; i <= config.mask_convs; ++i) {
    // The last conv of the stack runs after upsampling.
    const std::string name = i < config.mask_convs ? "mask.conv" + std::to_string(i) : std::string("mask.up_conv");
    mask_w_.push_back(store.add(name + ".weight", {config.mask_channels, c_in, 3, 3}));
    mask_b_.push_back(store.add(name + ".bias", {config.mask_channels}));
    nn::init_uniform(mask_w_.back().mutable_value(), c_in * 9, gain * nn::role_gain(nn::InitRole::kRelu), rng);
    c_in = config.mask_channels;
  }
  mask_out_w_ = store.add("mask.out.weight", {classes_ - 1, c_in, 1, 1});
  mask_out_b_ = store.add("mask.out.bias", {classes_ - 1});
  nn::init_uniform(mask_out_w_.mutable_value(), c_in, predictor, rng);
}

template <typename T>
void RoiHeads<T>::classify(const Var<T>& pooled, HeadOutputs<T>& out) const {
  const Shape& s = pooled.shape();
  if (s.size() != 4 || s[1] != channels_ || s[2] != pool_ || s[3] != pool_) {
    throw ValidationError("classify: pooled features must be [n," + std::to_string(channels_) + "," +
                          std::to_string(pool_) + "," + std::to_string(pool_) + "], got " + nn::shape_str(s));
  }
  Var<T> x = nn::reshape(pooled, {s[0], channels_ * pool_ * pool_});
  for (std::size_t i = 0; i < fc_w_.size(); ++i) x = nn::relu(nn::dense(x, fc_w_[i], fc_b_[i]));
  out.class_probs = nn::softmax_rows(nn::dense(x, cls_w_, cls_b_));
  out.deltas = nn::dense(x, box_w_, box_b_);
}

template <typename T>
Var<T> RoiHeads<T>::predict_masks(const Var<T>& pooled) const {
  const Shape& s = pooled.shape();
  if (s.size() != 4 || s[1] != channels_ || s[2] != mask_pool_ || s[3] != mask_pool_) {
    throw ValidationError("predict_masks: pooled features must be [n," + std::to_string(channels_) + "," +
                          std::to_string(mask_pool_) + "," + std::to_string(mask_pool_) + "], got " +
                          nn::shape_str(s));
  }
  Var<T> x = pooled;
  const std::size_t last = mask_w_.size() - 1;
  for (std::size_t i = 0; i < last; ++i) x = nn::relu(nn::conv2d(x, mask_w_[i], mask_b_[i], 1, 1));
  x = nn::resample2d(x, nn::ResampleMode::kNearestUpsample2x);
  x = nn::relu(nn::conv2d(x, mask_w_[last], mask_b_[last], 1, 1));
  return nn::sigmoid(nn::conv2d(x, mask_out_w_, mask_out_b_, 1, 0));
}

template <typename T>
HeadOutputs<T> heads_forward(const RoiHeads<T>& heads, const Var<T>& pooled, const Var<T>& mask_pooled) {
  HeadOutputs<T> out;
  heads.classify(pooled, out);
  out.masks = heads.predict_masks(mask_pooled);
  return out;
}

// ---------------------------------------------------------------- targets

namespace {

std::vector<std::size_t> shuffled_prefix(std::vector<std::size_t> items, std::size_t keep, std::mt19937_64& rng) {
  keep = std::min(keep, items.size());
  for (std::size_t i = 0; i < keep; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, items.size() - 1);
    std::swap(items[i], items[pick(rng)]);
  }
  items.resize(keep);
  return items;
}

/// Mask crop of `roi` (normalized) resampled to m x m and binarized.
std::vector<float> mask_target(const Mask& mask, const Box& roi, int m) {
  std::vector<float> out(static_cast<std::size_t>(m) * m);
  const double y1 = roi.y1 * mask.height, x1 = roi.x1 * mask.width;
  const double ch = roi.height() * mask.height / m, cw = roi.width() * mask.width / m;
  for (int i = 0; i < m; ++i) {
    int a0, a1;
    double fy;
    axis_taps(y1 + (i + 0.5) * ch - 0.5, mask.height, a0, a1, fy);
    for (int j = 0; j < m; ++j) {
      int b0, b1;
      double fx;
      axis_taps(x1 + (j + 0.5) * cw - 0.5, mask.width, b0, b1, fx);
      const double v = (1 - fy) * ((1 - fx) * mask.at(a0, b0) + fx * mask.at(a0, b1)) +
                       fy * ((1 - fx) * mask.at(a1, b0) + fx * mask.at(a1, b1));
      out[static_cast<std::size_t>(i) * m + j] = v >= 0.5 ? 1.0f : 0.0f;
    }
  }
  return out;
}

}  // namespace

RoiTargets build_roi_targets(std::span<const Box> proposals, const GroundTruth& gt, const ModelConfig& config,
                             std::mt19937_64& rng) {
  if (gt.boxes.empty()) throw ValidationError("build_roi_targets: no ground-truth boxes");
  if (gt.class_ids.size() != gt.boxes.size() || gt.masks.size() != gt.boxes.size()) {
    throw ValidationError("build_roi_targets: ground-truth boxes, classes and masks differ in count");
  }
  std::vector<Box> pool;
  for (const Box& b : proposals) {
    if (b.area() > 0) pool.push_back(b);
  }
  if (config.roi_include_gt) pool.insert(pool.end(), gt.boxes.begin(), gt.boxes.end());

  const IouMatrix overlaps = iou_matrix(pool, gt.boxes);
  std::vector<int> match(pool.size(), -1);
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    double best = -1.0;
    for (std::size_t j = 0; j < gt.boxes.size(); ++j) {
      if (overlaps(i, j) > best) {
        best = overlaps(i, j);
        match[i] = static_cast<int>(j);
      }
    }
    (best >= config.roi_iou_threshold ? pos : neg).push_back(i);
  }
  const auto sample = static_cast<std::size_t>(config.roi_sample_size);
  const auto max_pos = static_cast<std::size_t>(config.roi_sample_size * config.roi_positive_fraction + 1e-9);
  pos = shuffled_prefix(std::move(pos), max_pos, rng);
  neg = shuffled_prefix(std::move(neg), sample - pos.size(), rng);

  const auto std4 = config.delta_std();
  RoiTargets t;
  t.mask_size = config.mask_size;
  for (std::size_t i : pos) {
    const int g = match[i];
    t.rois.push_back(pool[i]);
    t.labels.push_back(gt.class_ids[g]);
    const BoxDelta d = encode_deltas(pool[i], gt.boxes[g]);
    t.deltas.push_back({d.dy / std4[0], d.dx / std4[1], d.dh / std4[2], d.dw / std4[3]});
    t.masks.push_back(mask_target(gt.masks[g], pool[i], config.mask_size));
  }
  for (std::size_t i : neg) {
    t.rois.push_back(pool[i]);
    t.labels.push_back(0);
  }
  return t;
}

// ---------------------------------------------------------------- loss

template <typename T>
HeadLoss<T> multitask_loss(const HeadOutputs<T>& out, const RoiTargets& targets, const LossConfig& cfg) {
  const int n = static_cast<int>(targets.rois.size());
  const Shape& ps = out.class_probs.shape();
  if (ps.size() != 2 || ps[0] != n) {
    throw ValidationError("multitask_loss: class_probs " + nn::shape_str(ps) + " vs " + std::to_string(n) + " RoIs");
  }
  const int k = ps[1];
  const int n_pos = targets.num_positive();
  const auto zero = [] { return nn::constant(Tensor<T>({1}, T{0})); };

  HeadLoss<T> loss;
  if (n == 0) {
    loss.cls = zero();
  } else {
    const double n_cls = cfg.n_cls == Normalizer::kCount ? n : cfg.n_cls_fixed;
    loss.cls = nn::cross_entropy(out.class_probs, targets.labels, n_cls);
  }
  if (n_pos == 0) {
    loss.reg = zero();
    loss.mask = zero();
  } else {
    std::vector<std::int64_t> idx;
    std::vector<T> target;
    for (int r = 0; r < n_pos; ++r) {
      const int c = targets.labels[r] - 1;
      for (int q = 0; q < 4; ++q) idx.push_back(static_cast<std::int64_t>(r) * (k - 1) * 4 + c * 4 + q);
      const BoxDelta& d = targets.deltas[r];
      target.insert(target.end(), {static_cast<T>(d.dy), static_cast<T>(d.dx), static_cast<T>(d.dh),
                                   static_cast<T>(d.dw)});
    }
    const double n_reg = cfg.n_reg == Normalizer::kCount ? n_pos : cfg.n_reg_fixed;
    loss.reg = nn::smooth_l1(nn::gather(out.deltas, std::move(idx), {n_pos, 4}),
                             Tensor<T>({n_pos, 4}, std::move(target)), n_reg);

    const Shape& ms = out.masks.shape();
    const int m = targets.mask_size;
    if (ms.size() != 4 || ms[0] < n_pos || ms[1] != k - 1 || ms[2] != m || ms[3] != m) {
      throw ValidationError("multitask_loss: masks " + nn::shape_str(ms) + " do not cover " +
                            std::to_string(n_pos) + " positive RoIs at size " + std::to_string(m));
    }
    const std::size_t area = static_cast<std::size_t>(m) * m;
    std::vector<std::int64_t> midx;
    std::vector<T> mtarget;
    midx.reserve(n_pos * area);
    for (int r = 0; r < n_pos; ++r) {
      const std::size_t base = (static_cast<std::size_t>(r) * (k - 1) + (targets.labels[r] - 1)) * area;
      for (std::size_t p = 0; p < area; ++p) midx.push_back(static_cast<std::int64_t>(base + p));
      mtarget.insert(mtarget.end(), targets.masks[r].begin(), targets.masks[r].end());
    }
    loss.mask = nn::binary_cross_entropy(nn::gather(out.masks, std::move(midx), {n_pos, m, m}),
                                         Tensor<T>({n_pos, m, m}, std::move(mtarget)));
  }
  loss.total = nn::add(nn::add(nn::scale(loss.cls, cfg.w_cls), nn::scale(loss.reg, cfg.w_reg)),
                       nn::scale(loss.mask, cfg.w_mask));
  return loss;
}

// ---------------------------------------------------------------- inference

template <typename T>
std::vector<Candidate> select_detections(const Tensor<T>& class_probs, const Tensor<T>& deltas,
                                         std::span<const Box> rois, const ModelConfig& config) {
  const int n = static_cast<int>(rois.size());
  const int k = config.num_classes;
  if (class_probs.shape() != Shape{n, k} || deltas.shape() != Shape{n, 4 * (k - 1)}) {
    throw ValidationError("select_detections: head outputs do not match " + std::to_string(n) + " RoIs");
  }
  const auto std4 = config.delta_std();
  std::map<int, Candidate> best;  // per class
  for (int r = 0; r < n; ++r) {
    int cls = 1;
    for (int c = 2; c < k; ++c) {
      if (class_probs[static_cast<std::size_t>(r) * k + c] > class_probs[static_cast<std::size_t>(r) * k + cls]) cls = c;
    }
    const double score = class_probs[static_cast<std::size_t>(r) * k + cls];
    if (score < config.detection_threshold) continue;
    const T* d = deltas.data() + static_cast<std::size_t>(r) * 4 * (k - 1) + (cls - 1) * 4;
    const Box refined = decode_deltas(rois[r], {d[0] * std4[0], d[1] * std4[1], d[2] * std4[2], d[3] * std4[3]});
    const Box box = sanitize_boxes(std::span<const Box>(&refined, 1), 1.0, 1.0, false)[0];
    if (!(box.area() > 0)) continue;
    auto it = best.find(cls);
    if (it == best.end() || score > it->second.score) best[cls] = {static_cast<std::size_t>(r), cls, score, box};
  }
  std::vector<Candidate> out;
  for (const auto& [cls, cand] : best) out.push_back(cand);
  std::sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    return a.score > b.score || (a.score == b.score && a.roi < b.roi);
  });
  if (out.size() > static_cast<std::size_t>(config.max_detections)) out.resize(config.max_detections);
  return out;
}

template <typename T>
Mask paste_mask(std::span<const T> mask, int m, const Box& box, int image_h, int image_w, double threshold) {
  Mask out(image_h, image_w);
  const double by1 = box.y1 * image_h, bx1 = box.x1 * image_w;
  const double bh = box.height() * image_h, bw = box.width() * image_w;
  if (!(bh > 0) || !(bw > 0)) return out;
  const int y_begin = std::max(0, static_cast<int>(std::floor(by1)));
  const int y_end = std::min(image_h, static_cast<int>(std::ceil(by1 + bh)));
  const int x_begin = std::max(0, static_cast<int>(std::floor(bx1)));
  const int x_end = std::min(image_w, static_cast<int>(std::ceil(bx1 + bw)));
  for (int y = y_begin; y < y_end; ++y) {
    const double cy = y + 0.5;
    if (cy < by1 || cy >= by1 + bh) continue;
    int a0, a1;
    double fy;
    axis_taps((cy - by1) / bh * m - 0.5, m, a0, a1, fy);
    for (int x = x_begin; x < x_end; ++x) {
      const double cx = x + 0.5;
      if (cx < bx1 || cx >= bx1 + bw) continue;
      int b0, b1;
      double fx;
      axis_taps((cx - bx1) / bw * m - 0.5, m, b0, b1, fx);
      const double v = (1 - fy) * ((1 - fx) * mask[a0 * m + b0] + fx * mask[a0 * m + b1]) +
                       fy * ((1 - fx) * mask[a1 * m + b0] + fx * mask[a1 * m + b1]);
      out.at(y, x) = v >= threshold ? 1 : 0;
    }
  }
  return out;
}

template <typename T>
std::vector<Detection> detection_postprocess(const Tensor<T>& class_probs, const Tensor<T>& deltas,
                                             const Tensor<T>& masks, std::span<const Box> rois, int image_h,
                                             int image_w, const ModelConfig& config) {
  const int m = config.mask_size;
  const int fg = config.num_classes - 1;
  if (masks.shape() != Shape{static_cast<int>(rois.size()), fg, m, m}) {
    throw ValidationError("detection_postprocess: masks " + nn::shape_str(masks.shape()) + " do not match RoIs");
  }
  std::vector<Detection> out;
  const std::size_t area = static_cast<std::size_t>(m) * m;
  for (const Candidate& c : select_detections(class_probs, deltas, rois, config)) {
    const T* p = masks.data() + (c.roi * fg + (c.class_id - 1)) * area;
    Mask mask = paste_mask(std::span<const T>(p, area), m, c.box, image_h, image_w, config.mask_threshold);
    if (mask.empty()) continue;
    out.push_back({c.class_id, c.score, c.box, std::move(mask)});
  }
  return out;
}

#define BRAINSEG_INSTANTIATE_HEADS(T)                                                                          \
  template Var<T> roi_align<T>(const PyramidFeatures<T>&, std::span<const Box>, int);                          \
  template class RoiHeads<T>;                                                                                  \
  template HeadOutputs<T> heads_forward<T>(const RoiHeads<T>&, const Var<T>&, const Var<T>&);                  \
  template HeadLoss<T> multitask_loss<T>(const HeadOutputs<T>&, const RoiTargets&, const LossConfig&);          \
  template std::vector<Candidate> select_detections<T>(const Tensor<T>&, const Tensor<T>&, std::span<const Box>, \
                                                       const ModelConfig&);                                    \
  template Mask paste_mask<T>(std::span<const T>, int, const Box&, int, int, double);                          \
  template std::vector<Detection> detection_postprocess<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                                           std::span<const Box>, int, int, const ModelConfig&);

BRAINSEG_INSTANTIATE_HEADS(float)
BRAINSEG_INSTANTIATE_HEADS(double)

}  // namespace brainseg
