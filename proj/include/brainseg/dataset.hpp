#pragma once

// Section images and their color-coded label rasters: region profiles,
// mask extraction, augmentation, downsampling, splits, manifests and the
// synthetic phantom generator.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "brainseg/geometry.hpp"
#include "brainseg/mask.hpp"
#include "brainseg/model.hpp"
#include "json.hpp"

namespace brainseg {

struct Rgb {
  std::uint8_t r = 0;
  std::uint8_t g = 0;
  std::uint8_t b = 0;

  friend bool operator==(const Rgb&, const Rgb&) = default;
  friend auto operator<=>(const Rgb&, const Rgb&) = default;
};

/// 8-bit RGB raster, row-major, interleaved.
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(int h, int w, Rgb fill = {});

  Rgb at(int y, int x) const {
    const std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
    return {pixels[i], pixels[i + 1], pixels[i + 2]};
  }
  void set(int y, int x, Rgb c) {
    const std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
    pixels[i] = c.r;
    pixels[i + 1] = c.g;
    pixels[i + 2] = c.b;
  }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

RgbImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RgbImage& image);

struct RegionProfile {
  std::string name;
  int version = 1;
  std::vector<std::string> classes;  // class id i+1 is classes[i]
  std::vector<Rgb> colors;
  Rgb background{0, 0, 0};

  int num_classes() const { return static_cast<int>(classes.size()); }
  /// Throws ConfigError on duplicate colors or mismatched lengths.
  void validate() const;

  /// Built-in tables; identical to data/profiles/<name>.json.
  static RegionProfile builtin(const std::string& name);
};

void to_json(nlohmann::json& j, const RegionProfile& p);
void from_json(const nlohmann::json& j, RegionProfile& p);
RegionProfile load_profile(const std::filesystem::path& path);

struct InstanceMasks {
  std::vector<Mask> masks;
  std::vector<int> class_ids;  // ascending
};

/// One mask per profile color present. Pixels within 8 per channel of
/// exactly one region color (or of the background) snap to it; other pixels
/// count as unknown and become background. More than `unknown_tolerance`
/// unknown pixels is a ValidationError listing the offending colors.
InstanceMasks extract_instance_masks(const RgbImage& label, const RegionProfile& profile,
                                     std::size_t unknown_tolerance = 0);

/// Inverse of extract_instance_masks for disjoint masks.
RgbImage render_label(const std::vector<Mask>& masks, const std::vector<int>& class_ids,
                      const RegionProfile& profile, int height, int width);

enum class Split { kTrain, kTest };

struct SectionRecord {
  RgbImage image;
  std::vector<Mask> masks;
  std::vector<int> class_ids;
  std::vector<Box> boxes;  // pixels, tight around each mask
  int rotation_deg = 0;
  bool flipped = false;
  Split split = Split::kTrain;
  std::string source_id;
};

/// Builds a record from an image and its label raster.
SectionRecord make_record(RgbImage image, const RgbImage& label, const RegionProfile& profile,
                          std::string source_id, std::size_t unknown_tolerance = 0);

/// Empty list when the record satisfies every invariant, else one message
/// per violation.
std::vector<std::string> validate_record(const SectionRecord& record);

/// Rotation by `degrees` (counter-clockwise as displayed) about the image
/// center: bilinear for the image with `fill` outside, nearest neighbour for
/// masks. Instances rotated entirely out of frame are dropped.
SectionRecord rotate_record(const SectionRecord& record, double degrees, Rgb fill = {});
SectionRecord flip_record(const SectionRecord& record);

/// Rotations from `min_deg` to `max_deg` in steps of `step_deg`, skipping 0
/// unless `include_zero`; with `include_flip` the same sweep is applied to
/// the mirrored section as well.
std::vector<SectionRecord> augment_rotations(const SectionRecord& record, int min_deg, int max_deg, int step_deg,
                                             bool include_flip, bool include_zero = false);

/// Area-averaged image, max-pooled masks, boxes recomputed. Output extent is
/// round(factor * input). Vanished instances are dropped and reported
/// through `warnings` when given.
SectionRecord downsample(const SectionRecord& record, double factor, std::vector<std::string>* warnings = nullptr);

struct ManifestEntry {
  std::string source_id;
  std::string image_path;  // relative to the manifest
  std::string label_path;
  int rotation_deg = 0;
  bool flipped = false;
  Split split = Split::kTrain;
};

struct DatasetManifest {
  std::string profile;
  double downsample_factor = 1.0;
  std::vector<ManifestEntry> records;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

/// Number of sources assigned to training: ceil(fraction * n).
std::size_t train_source_count(std::size_t sources, double train_fraction);

/// Assigns whole source ids to train or test (seeded shuffle of the sorted
/// ids, first train_source_count go to train), writes the split into every
/// record and returns the manifest entries in record order.
DatasetManifest split_dataset(std::vector<SectionRecord>& records, double train_fraction, std::uint64_t seed);

struct PhantomPair {
  RgbImage image;
  RgbImage label;
};

/// Synthetic section: a textured elliptical slab holding one blob per
/// profile class at a class-specific layout position, each with its own
/// brightness, grating frequency and contrast, plus seeded jitter of
/// position, size, outline and texture phase.
PhantomPair generate_phantom(const RegionProfile& profile, std::uint64_t seed, int height, int width);

/// [3,H,W] in [0,1].
nn::Tensor<float> to_tensor(const RgbImage& image);

/// Tensor image padded with zeros at the bottom/right to a multiple of
/// `multiple`, masks padded alike.
TrainingExample to_training_example(const SectionRecord& record, int multiple);

}  // namespace brainseg
