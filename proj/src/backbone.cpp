#include "brainseg/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "brainseg/errors.hpp"

namespace brainseg {

using nn::Var;

BackboneConfig BackboneConfig::desk() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::paper() {
  BackboneConfig c;
  c.stage_blocks = {3, 4, 23, 3};
  c.channels = {256, 512, 1024, 2048};
  c.stem_channels = 64;
  c.stem_kernel = 7;
  c.fpn_channels = 256;
  c.block = BlockKind::kBottleneck;
  return c;
}

std::vector<int> BackboneConfig::strides() const {
  std::vector<int> s;
  for (int l = 0; l < num_levels(); ++l) s.push_back(4 << l);
  return s;
}

void BackboneConfig::validate() const {
  if (stage_blocks.size() < 2) throw ConfigError("backbone needs at least 2 stages");
  if (channels.size() != stage_blocks.size()) {
    throw ConfigError("backbone: " + std::to_string(channels.size()) + " channel widths for " +
                      std::to_string(stage_blocks.size()) + " stages");
  }
  for (std::size_t s = 0; s < stage_blocks.size(); ++s) {
    if (stage_blocks[s] < 1) throw ConfigError("backbone: stage " + std::to_string(s) + " has no blocks");
    if (channels[s] < 1) throw ConfigError("backbone: stage " + std::to_string(s) + " has no channels");
    if (block == BlockKind::kBottleneck && channels[s] % 4 != 0) {
      throw ConfigError("backbone: bottleneck widths must be multiples of 4");
    }
  }
  if (stem_channels < 1 || fpn_channels < 1) throw ConfigError("backbone: channel counts must be positive");
  if (stem_kernel < 1 || stem_kernel % 2 == 0) throw ConfigError("backbone: stem kernel must be odd");
  if (!(init_gain > 0.0)) throw ConfigError("backbone: init_gain must be positive");
}

template <typename T>
std::vector<FeatureShape> PyramidFeatures<T>::shapes() const {
  std::vector<FeatureShape> out;
  for (const auto& l : levels) out.push_back({l.shape()[1], l.shape()[2]});
  return out;
}

template <typename T>
Var<T> Backbone<T>::Conv::operator()(const Var<T>& x) const {
  return nn::conv2d(x, weight, bias, stride, padding);
}

template <typename T>
typename Backbone<T>::Conv Backbone<T>::make_conv(nn::ParameterStore<T>& store, std::mt19937_64& rng,
                                                  const std::string& name, nn::InitRole role, int c_in,
                                                  int c_out, int k, int stride) {
  Conv c;
  c.weight = store.add(name + ".weight", {c_out, c_in, k, k});
  c.bias = store.add(name + ".bias", {c_out});
  nn::init_uniform(c.weight.mutable_value(), c_in * k * k, config_.init_gain * nn::role_gain(role), rng);
  c.stride = stride;
  c.padding = k / 2;
  return c;
}

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& config, nn::ParameterStore<T>& store, std::mt19937_64& rng)
    : config_(config) {
  config_.validate();
  stem_ = make_conv(store, rng, "backbone.stem.conv", nn::InitRole::kRelu, 3, config_.stem_channels, config_.stem_kernel, 2);

  int c_in = config_.stem_channels;
  for (int s = 0; s < config_.num_levels(); ++s) {
    const int c_out = config_.channels[s];
    std::vector<Block> blocks;
    for (int b = 0; b < config_.stage_blocks[s]; ++b) {
      const std::string prefix = "backbone.stage" + std::to_string(s) + ".block" + std::to_string(b);
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      Block blk;
      if (config_.block == BlockKind::kBasic) {
        blk.convs.push_back(make_conv(store, rng, prefix + ".conv1", nn::InitRole::kRelu, c_in, c_out, 3, stride));
        blk.convs.push_back(make_conv(store, rng, prefix + ".conv2", nn::InitRole::kResidualEnd, c_out, c_out, 3, 1));
      } else {
        const int width = c_out / 4;
        blk.convs.push_back(make_conv(store, rng, prefix + ".conv1", nn::InitRole::kRelu, c_in, width, 1, stride));
        blk.convs.push_back(make_conv(store, rng, prefix + ".conv2", nn::InitRole::kRelu, width, width, 3, 1));
        blk.convs.push_back(make_conv(store, rng, prefix + ".conv3", nn::InitRole::kResidualEnd, width, c_out, 1, 1));
      }
      if (stride != 1 || c_in != c_out) {
        blk.has_projection = true;
        blk.projection = make_conv(store, rng, prefix + ".proj", nn::InitRole::kLinear, c_in, c_out, 1, stride);
      }
      blocks.push_back(std::move(blk));
      c_in = c_out;
    }
    stages_.push_back(std::move(blocks));
  }
  for (int s = 0; s < config_.num_levels(); ++s) {
    lateral_.push_back(make_conv(store, rng, "fpn.lateral" + std::to_string(s), nn::InitRole::kLinear, config_.channels[s],
                                 config_.fpn_channels, 1, 1));
  }
  for (int s = 0; s < config_.num_levels(); ++s) {
    smooth_.push_back(make_conv(store, rng, "fpn.smooth" + std::to_string(s), nn::InitRole::kLinear, config_.fpn_channels,
                                config_.fpn_channels, 3, 1));
  }
}

template <typename T>
Var<T> Backbone<T>::frozen_norm(const Var<T>& x) const {
  const int c = x.shape()[0];
  return nn::frozen_affine(x, nn::Tensor<T>({c}, T{1}), nn::Tensor<T>({c}, T{0}));
}

template <typename T>
PyramidFeatures<T> Backbone<T>::extract_pyramid(const Var<T>& image) const {
  const auto& shape = image.shape();
  if (shape.size() != 3 || shape[0] != 3) {
    throw ValidationError("extract_pyramid: image must be [3,H,W], got " + nn::shape_str(shape));
  }
  const int top = config_.top_stride();
  if (shape[1] % top != 0 || shape[2] % top != 0 || shape[1] == 0 || shape[2] == 0) {
    throw ValidationError("extract_pyramid: image extent " + std::to_string(shape[1]) + "x" +
                          std::to_string(shape[2]) + " is not a multiple of " + std::to_string(top) +
                          "; pad the image first");
  }

  Var<T> x = nn::relu(frozen_norm(stem_(image)));
  x = nn::resample2d(x, nn::ResampleMode::kMaxPool2x2);

  std::vector<Var<T>> stage_out;
  for (const auto& blocks : stages_) {
    for (const auto& blk : blocks) {
      Var<T> y = x;
      for (std::size_t i = 0; i < blk.convs.size(); ++i) {
        y = frozen_norm(blk.convs[i](y));
        if (i + 1 < blk.convs.size()) y = nn::relu(y);
      }
      const Var<T> shortcut = blk.has_projection ? frozen_norm(blk.projection(x)) : x;
      x = nn::relu(nn::add(y, shortcut));
    }
    stage_out.push_back(x);
  }

  const int levels = config_.num_levels();
  std::vector<Var<T>> merged(levels);
  merged[levels - 1] = lateral_[levels - 1](stage_out[levels - 1]);
  for (int l = levels - 2; l >= 0; --l) {
    merged[l] = nn::add(lateral_[l](stage_out[l]),
                        nn::resample2d(merged[l + 1], nn::ResampleMode::kNearestUpsample2x));
  }
  PyramidFeatures<T> out;
  for (int l = 0; l < levels; ++l) out.levels.push_back(smooth_[l](merged[l]));
  out.strides = config_.strides();
  return out;
}

template <typename T>
BuiltBackbone<T> build_backbone(const BackboneConfig& config, std::uint64_t seed) {
  BuiltBackbone<T> b;
  std::mt19937_64 rng(seed);
  b.net = std::make_unique<Backbone<T>>(config, b.params, rng);
  return b;
}

std::size_t backbone_parameter_count(const BackboneConfig& config) {
  config.validate();
  auto conv = [](std::size_t c_in, std::size_t c_out, std::size_t k) { return c_out * c_in * k * k + c_out; };
  std::size_t n = conv(3, config.stem_channels, config.stem_kernel);
  std::size_t c_in = config.stem_channels;
  for (int s = 0; s < config.num_levels(); ++s) {
    const std::size_t c_out = config.channels[s];
    for (int b = 0; b < config.stage_blocks[s]; ++b) {
      const bool strided = s > 0 && b == 0;
      if (config.block == BlockKind::kBasic) {
        n += conv(c_in, c_out, 3) + conv(c_out, c_out, 3);
      } else {
        const std::size_t w = c_out / 4;
        n += conv(c_in, w, 1) + conv(w, w, 3) + conv(w, c_out, 1);
      }
      if (strided || c_in != c_out) n += conv(c_in, c_out, 1);
      c_in = c_out;
    }
    n += conv(c_out, config.fpn_channels, 1) + conv(config.fpn_channels, config.fpn_channels, 3);
  }
  return n;
}

int assign_roi_level(const Box& box, int image_h, int image_w, int num_levels) {
  const double area = box.area() * static_cast<double>(image_h) * image_w;
  if (!(area > 0.0)) return 0;
  const int k = 2 + static_cast<int>(std::floor(std::log2(std::sqrt(area) / 224.0)));
  return std::clamp(k, 0, num_levels - 1);
}

template struct PyramidFeatures<float>;
template struct PyramidFeatures<double>;
template class Backbone<float>;
template class Backbone<double>;
template BuiltBackbone<float> build_backbone<float>(const BackboneConfig&, std::uint64_t);
template BuiltBackbone<double> build_backbone<double>(const BackboneConfig&, std::uint64_t);

}  // namespace brainseg
