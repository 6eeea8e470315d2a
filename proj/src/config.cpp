#include "brainseg/config.hpp"

#include <set>

#include "brainseg/errors.hpp"

namespace brainseg {

using nlohmann::json;

void LossConfig::validate() const {
  if (!(mu >= 0) || !(w_cls >= 0) || !(w_reg >= 0) || !(w_mask >= 0)) {
    throw ConfigError("loss: mu and component weights must be non-negative");
  }
  if (!(n_cls_fixed > 0) || !(n_reg_fixed > 0)) throw ConfigError("loss: fixed normalizers must be positive");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.backbone = BackboneConfig::paper();
  c.anchor_scales = {32, 64, 128, 256};
  c.rpn_sample_size = 256;
  c.train_pre_nms = 6000;
  c.train_post_nms = 2000;
  c.infer_pre_nms = 6000;
  c.infer_post_nms = 1000;
  c.roi_sample_size = 200;
  c.head_fc_dim = 1024;
  c.mask_channels = 256;
  c.mask_convs = 4;
  return c;
}

std::array<double, 4> ModelConfig::delta_std() const {
  if (standardize_deltas) return {0.1, 0.1, 0.2, 0.2};
  return {1.0, 1.0, 1.0, 1.0};
}

void ModelConfig::validate() const {
  backbone.validate();
  if (num_classes < 2) throw ConfigError("model: num_classes must be at least 2");
  if (anchor_scales.size() != static_cast<std::size_t>(backbone.num_levels())) {
    throw ConfigError("model: " + std::to_string(anchor_scales.size()) + " anchor scales for " +
                      std::to_string(backbone.num_levels()) + " pyramid levels");
  }
  if (anchor_ratios.empty()) throw ConfigError("model: no anchor ratios");
  for (double r : anchor_ratios) {
    if (!(r > 0)) throw ConfigError("model: anchor ratios must be positive");
  }
  for (double s : anchor_scales) {
    if (!(s > 0)) throw ConfigError("model: anchor scales must be positive");
  }
  if (rpn_sample_size < 1 || roi_sample_size < 1) throw ConfigError("model: sample sizes must be positive");
  if (train_pre_nms < 1 || train_post_nms < 1 || infer_pre_nms < 1 || infer_post_nms < 1) {
    throw ConfigError("model: proposal caps must be positive");
  }
  if (!(roi_positive_fraction > 0 && roi_positive_fraction <= 1)) {
    throw ConfigError("model: roi_positive_fraction must be in (0,1]");
  }
  if (pool_size < 1 || mask_pool_size < 1) throw ConfigError("model: pool sizes must be positive");
  if (mask_size != 2 * mask_pool_size) throw ConfigError("model: mask_size must be twice mask_pool_size");
  if (head_fc_dim < 1 || mask_channels < 1 || mask_convs < 0) throw ConfigError("model: head widths must be positive");
  if (max_detections < 1) throw ConfigError("model: max_detections must be positive");
  if (!(pixel_scale > 0)) throw ConfigError("model: pixel_scale must be positive");
}

Schedule Schedule::desk() {
  Schedule s;
  s.stages = {{"heads", true, 600, 1e-3}, {"all", false, 900, 1e-4}};
  return s;
}

Schedule Schedule::paper() {
  Schedule s;
  s.stages = {{"heads", true, 6000, 1e-3}, {"all", false, 9000, 1e-4}};
  return s;
}

void Schedule::validate() const {
  if (stages.empty()) throw ConfigError("schedule: at least one stage is required");
  for (const auto& st : stages) {
    if (st.iterations < 0) throw ConfigError("schedule: stage '" + st.name + "' has negative iterations");
    if (!(st.learning_rate >= 0)) throw ConfigError("schedule: stage '" + st.name + "' has a negative learning rate");
  }
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("schedule: momentum must be in [0,1)");
  if (!(clip_norm >= 0)) throw ConfigError("schedule: clip_norm must be non-negative");
}

// ---------------------------------------------------------------- JSON

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError(where + ": unknown field '" + key + "'");
  }
}

template <typename V>
void read(const json& j, const char* key, V& field) {
  if (j.contains(key)) j.at(key).get_to(field);
}

const char* to_string(Normalizer n) { return n == Normalizer::kCount ? "count" : "fixed"; }

Normalizer parse_normalizer(const std::string& s) {
  if (s == "count") return Normalizer::kCount;
  if (s == "fixed") return Normalizer::kFixed;
  throw ConfigError("loss: normalizer must be 'count' or 'fixed', got '" + s + "'");
}

}  // namespace

void to_json(json& j, const BackboneConfig& c) {
  j = json{{"stage_blocks", c.stage_blocks},
           {"channels", c.channels},
           {"stem_channels", c.stem_channels},
           {"stem_kernel", c.stem_kernel},
           {"fpn_channels", c.fpn_channels},
           {"block", c.block == BlockKind::kBasic ? "basic" : "bottleneck"},
           {"init_gain", c.init_gain}};
}

void from_json(const json& j, BackboneConfig& c) {
  reject_unknown(j, {"stage_blocks", "channels", "stem_channels", "stem_kernel", "fpn_channels", "block", "init_gain"},
                 "backbone");
  read(j, "stage_blocks", c.stage_blocks);
  read(j, "channels", c.channels);
  read(j, "stem_channels", c.stem_channels);
  read(j, "stem_kernel", c.stem_kernel);
  read(j, "fpn_channels", c.fpn_channels);
  read(j, "init_gain", c.init_gain);
  if (j.contains("block")) {
    const auto b = j.at("block").get<std::string>();
    if (b == "basic") {
      c.block = BlockKind::kBasic;
    } else if (b == "bottleneck") {
      c.block = BlockKind::kBottleneck;
    } else {
      throw ConfigError("backbone: block must be 'basic' or 'bottleneck', got '" + b + "'");
    }
  }
}

void to_json(json& j, const LossConfig& c) {
  j = json{{"mu", c.mu},
           {"n_cls", to_string(c.n_cls)},
           {"n_reg", to_string(c.n_reg)},
           {"n_cls_fixed", c.n_cls_fixed},
           {"n_reg_fixed", c.n_reg_fixed},
           {"w_cls", c.w_cls},
           {"w_reg", c.w_reg},
           {"w_mask", c.w_mask}};
}

void from_json(const json& j, LossConfig& c) {
  reject_unknown(j, {"mu", "n_cls", "n_reg", "n_cls_fixed", "n_reg_fixed", "w_cls", "w_reg", "w_mask"}, "loss");
  read(j, "mu", c.mu);
  if (j.contains("n_cls")) c.n_cls = parse_normalizer(j.at("n_cls").get<std::string>());
  if (j.contains("n_reg")) c.n_reg = parse_normalizer(j.at("n_reg").get<std::string>());
  read(j, "n_cls_fixed", c.n_cls_fixed);
  read(j, "n_reg_fixed", c.n_reg_fixed);
  read(j, "w_cls", c.w_cls);
  read(j, "w_reg", c.w_reg);
  read(j, "w_mask", c.w_mask);
}

#define BRAINSEG_MODEL_FIELDS(X)                                                                                 \
  X(num_classes) X(anchor_scales) X(anchor_ratios) X(rpn_sample_size) X(rpn_iou_threshold) X(rpn_nms_threshold) \
  X(train_pre_nms) X(train_post_nms) X(infer_pre_nms) X(infer_post_nms) X(standardize_deltas)                  \
  X(roi_sample_size) X(roi_positive_fraction) X(roi_iou_threshold) X(roi_include_gt) X(pool_size)               \
  X(mask_pool_size) X(mask_size) X(head_fc_dim) X(mask_channels) X(mask_convs) X(max_detections)               \
  X(detection_threshold) X(mask_threshold) X(pixel_mean) X(pixel_scale)

void to_json(json& j, const ModelConfig& c) {
  j = json::object();
  j["backbone"] = c.backbone;
#define X(f) j[#f] = c.f;
  BRAINSEG_MODEL_FIELDS(X)
#undef X
}

void from_json(const json& j, ModelConfig& c) {
  std::set<std::string> known{"backbone"};
#define X(f) known.insert(#f);
  BRAINSEG_MODEL_FIELDS(X)
#undef X
  reject_unknown(j, known, "model");
  if (j.contains("backbone")) from_json(j.at("backbone"), c.backbone);
#define X(f) read(j, #f, c.f);
  BRAINSEG_MODEL_FIELDS(X)
#undef X
}

void to_json(json& j, const TrainStage& s) {
  j = json{{"name", s.name}, {"heads_only", s.heads_only}, {"iterations", s.iterations},
           {"learning_rate", s.learning_rate}};
}

void from_json(const json& j, TrainStage& s) {
  reject_unknown(j, {"name", "heads_only", "iterations", "learning_rate"}, "schedule stage");
  read(j, "name", s.name);
  read(j, "heads_only", s.heads_only);
  read(j, "iterations", s.iterations);
  read(j, "learning_rate", s.learning_rate);
}

void to_json(json& j, const Schedule& s) {
  j = json{{"stages", s.stages}, {"momentum", s.momentum}, {"clip_norm", s.clip_norm}};
}

void from_json(const json& j, Schedule& s) {
  reject_unknown(j, {"stages", "momentum", "clip_norm"}, "schedule");
  read(j, "stages", s.stages);
  read(j, "momentum", s.momentum);
  read(j, "clip_norm", s.clip_norm);
}

}  // namespace brainseg
