#pragma once

// Model, loss and schedule hyperparameters, with the desk and paper presets
// and their JSON form.

#include <array>
#include <string>
#include <vector>

#include "brainseg/backbone.hpp"
#include "json.hpp"

namespace brainseg {

enum class Normalizer {
  kCount,  // sampled count for classification, positive count for regression
  kFixed,
};

struct LossConfig {
  double mu = 1.0;
  Normalizer n_cls = Normalizer::kCount;
  Normalizer n_reg = Normalizer::kCount;
  double n_cls_fixed = 1.0;
  double n_reg_fixed = 1.0;
  double w_cls = 1.0;
  double w_reg = 1.0;
  double w_mask = 1.0;

  void validate() const;
};

struct ModelConfig {
  BackboneConfig backbone;
  int num_classes = 9;  // regions + background

  std::vector<double> anchor_scales{16, 32, 64, 128};
  std::vector<double> anchor_ratios{0.5, 1.0, 2.0};
  int rpn_sample_size = 64;
  double rpn_iou_threshold = 0.5;
  double rpn_nms_threshold = 0.7;
  int train_pre_nms = 1000;
  int train_post_nms = 200;
  int infer_pre_nms = 500;
  int infer_post_nms = 100;
  bool standardize_deltas = false;

  int roi_sample_size = 32;
  double roi_positive_fraction = 0.33;
  double roi_iou_threshold = 0.5;
  bool roi_include_gt = true;  // ground-truth boxes join the proposal pool in training

  int pool_size = 7;
  int mask_pool_size = 14;
  int mask_size = 28;
  int head_fc_dim = 256;
  int mask_channels = 32;
  int mask_convs = 2;

  int max_detections = 8;
  double detection_threshold = 0.9;
  double mask_threshold = 0.5;

  // Input normalization applied to [0,1] images: (x - mean) / scale.
  double pixel_mean = 0.5;
  double pixel_scale = 0.25;

  static ModelConfig desk();
  static ModelConfig paper();

  /// (0.1, 0.1, 0.2, 0.2) when standardizing, else all ones.
  std::array<double, 4> delta_std() const;
  int foreground_classes() const { return num_classes - 1; }
  void validate() const;
};

struct TrainStage {
  std::string name;
  bool heads_only = false;  // freezes every "backbone." parameter
  int iterations = 0;
  double learning_rate = 0.0;
};

struct Schedule {
  std::vector<TrainStage> stages;
  double momentum = 0.9;
  double clip_norm = 5.0;  // global gradient-norm bound; 0 disables

  static Schedule desk();
  static Schedule paper();
  void validate() const;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);
void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainStage& s);
void from_json(const nlohmann::json& j, TrainStage& s);
void to_json(nlohmann::json& j, const Schedule& s);
void from_json(const nlohmann::json& j, Schedule& s);

}  // namespace brainseg
