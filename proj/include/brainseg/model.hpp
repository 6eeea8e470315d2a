#pragma once

// The full detector: backbone + pyramid, proposal network and RoI heads
// sharing one parameter store.

#include <cstdint>
#include <memory>
#include <random>
#include <vector>

#include "brainseg/backbone.hpp"
#include "brainseg/config.hpp"
#include "brainseg/heads.hpp"
#include "brainseg/mask.hpp"
#include "brainseg/rpn.hpp"

namespace brainseg {

/// One annotated image. `image` is [3,H,W] with values in [0,1]; boxes are
/// in pixels and are the tight boxes of the masks.
struct TrainingExample {
  nn::Tensor<float> image;
  std::vector<Box> boxes;
  std::vector<int> class_ids;
  std::vector<Mask> masks;
};

struct LossValues {
  double rpn_cls = 0.0;
  double rpn_reg = 0.0;
  double cls = 0.0;
  double reg = 0.0;
  double mask = 0.0;
  double total = 0.0;
};

template <typename T>
struct TrainingLoss {
  nn::Var<T> total;
  LossValues values;
};

template <typename T>
class Model {
 public:
  /// Parameters are registered backbone, fpn, rpn, heads in that order and
  /// initialized from a single generator seeded with `seed`.
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  nn::ParameterStore<T>& params() { return *params_; }
  const nn::ParameterStore<T>& params() const { return *params_; }
  const Backbone<T>& backbone() const { return *backbone_; }
  const RpnHead<T>& rpn() const { return *rpn_; }
  const RoiHeads<T>& heads() const { return *heads_; }

  /// (x - pixel_mean) / pixel_scale as a constant input.
  nn::Var<T> normalize_image(const nn::Tensor<float>& image) const;
  AnchorSet anchors_for(const PyramidFeatures<T>& pyramid) const;

  /// Combined proposal and head loss on one example. Anchor and RoI
  /// sampling draw from `rng`.
  TrainingLoss<T> training_loss(const TrainingExample& example, const LossConfig& loss,
                                std::mt19937_64& rng) const;

  /// Inference on a [3,H,W] image in [0,1]. Images whose extent is not a
  /// multiple of the top stride are zero-padded at the bottom/right; boxes
  /// and masks refer to the original extent. Records no graph.
  std::vector<Detection> detect(const nn::Tensor<float>& image) const;

 private:
  ModelConfig config_;
  std::unique_ptr<nn::ParameterStore<T>> params_;
  std::unique_ptr<Backbone<T>> backbone_;
  std::unique_ptr<RpnHead<T>> rpn_;
  std::unique_ptr<RoiHeads<T>> heads_;
};

}  // namespace brainseg
