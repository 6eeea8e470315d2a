#pragma once

// Residual backbone with a feature pyramid on top.
//
// Stage s (0-based) runs at stride 4 * 2^s. The pyramid has one level per
// stage, all with `fpn_channels` channels, built top-down with 1x1 lateral
// projections, nearest 2x upsampling plus addition, and a 3x3 smoothing
// convolution per level.

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "brainseg/geometry.hpp"
#include "brainseg/nn/ops.hpp"
#include "brainseg/nn/parameters.hpp"

namespace brainseg {

enum class BlockKind { kBasic, kBottleneck };

struct BackboneConfig {
  std::vector<int> stage_blocks{2, 2, 2, 2};
  std::vector<int> channels{16, 32, 64, 128};
  int stem_channels = 16;
  int stem_kernel = 3;
  int fpn_channels = 32;
  BlockKind block = BlockKind::kBasic;
  double init_gain = 1.0;

  static BackboneConfig desk();
  /// 101-layer bottleneck network with 256-wide pyramid. Buildable, but not
  /// something to train on a CPU.
  static BackboneConfig paper();

  int num_levels() const { return static_cast<int>(stage_blocks.size()); }
  int top_stride() const { return 4 << (num_levels() - 1); }
  std::vector<int> strides() const;
  /// Throws ConfigError when the configuration cannot be built.
  void validate() const;
};

template <typename T>
struct PyramidFeatures {
  std::vector<nn::Var<T>> levels;  // [C, H_l, W_l], finest first
  std::vector<int> strides;

  std::vector<FeatureShape> shapes() const;
};

template <typename T>
class Backbone {
 public:
  /// Registers and initializes all parameters under the "backbone." and
  /// "fpn." prefixes. Weights are drawn in registration order from `rng`;
  /// biases start at zero.
  Backbone(const BackboneConfig& config, nn::ParameterStore<T>& store, std::mt19937_64& rng);

  /// `image` is [3,H,W] with H and W multiples of the top stride.
  PyramidFeatures<T> extract_pyramid(const nn::Var<T>& image) const;

  const BackboneConfig& config() const { return config_; }

 private:
  struct Conv {
    nn::Var<T> weight;
    nn::Var<T> bias;
    int stride = 1;
    int padding = 0;
    nn::Var<T> operator()(const nn::Var<T>& x) const;
  };
  struct Block {
    std::vector<Conv> convs;  // 2 for basic, 3 for bottleneck
    bool has_projection = false;
    Conv projection;
  };

  Conv make_conv(nn::ParameterStore<T>& store, std::mt19937_64& rng, const std::string& name, nn::InitRole role,
                 int c_in, int c_out, int k, int stride);
  nn::Var<T> frozen_norm(const nn::Var<T>& x) const;

  BackboneConfig config_;
  Conv stem_;
  std::vector<std::vector<Block>> stages_;
  std::vector<Conv> lateral_;
  std::vector<Conv> smooth_;
};

/// Fresh parameter set for `config`, deterministic in `seed`.
template <typename T>
struct BuiltBackbone {
  nn::ParameterStore<T> params;
  std::unique_ptr<Backbone<T>> net;
};

template <typename T>
BuiltBackbone<T> build_backbone(const BackboneConfig& config, std::uint64_t seed);

/// Closed-form parameter count of a configuration.
std::size_t backbone_parameter_count(const BackboneConfig& config);

/// Pyramid level index (0 = finest) for a normalized RoI:
/// clamp(k0 + floor(log2(sqrt(h*w*H*W) / 224)), 0, num_levels-1) with k0 the
/// index of the stride-16 level. Zero-area boxes go to level 0.
int assign_roi_level(const Box& normalized_box, int image_h, int image_w, int num_levels);

}  // namespace brainseg
