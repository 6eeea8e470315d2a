#pragma once

// Operator surface behind the brainseg tool: run configuration, checkpoint
// files, detection serialization, overlays and the four subcommands. The
// commands are plain functions so tests can drive them in-process.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "brainseg/config.hpp"
#include "brainseg/dataset.hpp"
#include "brainseg/metrics.hpp"
#include "brainseg/model.hpp"
#include "brainseg/train.hpp"
#include "json.hpp"

namespace brainseg {

namespace fs = std::filesystem;

struct RunConfig {
  std::string preset = "desk";  // desk | paper; supplies defaults for model and schedule
  std::string profile = "mouse8";
  ModelConfig model = ModelConfig::desk();
  LossConfig loss;
  Schedule schedule = Schedule::desk();
  std::uint64_t seed = 1;       // parameter init, sampling and data order
  std::string manifest;         // dataset used by train; relative paths resolve against the config file
  int checkpoint_every = 0;     // steps between periodic checkpoints; 0 keeps only the final one
  int rotation_jitter_deg = 0;  // uniform integer rotation in [-j, j] applied to each training draw

  static RunConfig preset_defaults(const std::string& preset);
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Preset defaults, then `document` on top, then each "a.b.c=value" override
/// (value parsed as JSON, else taken as a string). The preset comes from the
/// override list if set there, else from the document.
RunConfig resolve_run_config(const nlohmann::json& document, const std::vector<std::string>& overrides = {});
RunConfig load_run_config(const fs::path& path, const std::vector<std::string>& overrides = {});

/// "SBRE" file: u32 version, u32 length + config JSON, u32 tensor count, then
/// per tensor u16 name length + name, u8 rank, u32 dims, f32 values; all
/// little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const fs::path& path, const RunConfig& config, const Model<float>& model);

struct LoadedCheckpoint {
  RunConfig config;
  Model<float> model;
};

/// Throws ValidationError when the file is malformed or its tensors do not
/// match the architecture its config describes.
LoadedCheckpoint load_checkpoint(const fs::path& path);

/// Run lengths over row-major pixels, alternating unset/set, starting with
/// unset (so the first count may be 0).
std::vector<std::uint32_t> rle_encode(const Mask& mask);
Mask rle_decode(const std::vector<std::uint32_t>& counts, int height, int width);

nlohmann::json detections_to_json(const std::string& section, const std::vector<Detection>& detections,
                                  const RegionProfile& profile, int height, int width);
std::vector<Detection> detections_from_json(const nlohmann::json& j);

/// Masks blended over the image in their profile colors, box outlines, and
/// the score printed above each box. No detections: the image unchanged.
RgbImage render_overlay(const RgbImage& image, const std::vector<Detection>& detections,
                        const RegionProfile& profile);

/// Class codes stored as gray levels (r = g = b = code).
void write_class_raster(const fs::path& path, const LabelRaster& raster);
LabelRaster read_class_raster(const fs::path& path);

// ---------------------------------------------------------------- commands

struct RotationSweep {
  int min_deg = -20;
  int max_deg = 20;
  int step_deg = 2;
};

/// Parses "lo:hi:step".
RotationSweep parse_rotation_sweep(const std::string& text);

struct PrepareOptions {
  fs::path input_dir;  // pairs <stem>_img.png / <stem>_lbl.png; unused with phantoms
  int phantoms = 0;
  int phantom_size = 256;
  std::string profile = "mouse8";
  bool use_rotations = false;
  RotationSweep rotations;
  bool include_zero = false;
  bool flip = false;
  double factor = 1.0;
  double train_fraction = 2.0 / 3.0;
  std::uint64_t seed = 1;
  std::size_t unknown_tolerance = 0;
  fs::path out_dir;
};

struct PrepareSummary {
  std::size_t sources = 0;
  std::size_t records = 0;
  std::size_t train_records = 0;
  std::size_t test_records = 0;
  std::vector<std::string> warnings;
};

/// Writes images/, labels/, manifest.json and report.json under out_dir.
PrepareSummary cmd_prepare(const PrepareOptions& options);

/// Section ids are file stems with a trailing "_img" removed.
std::string section_id_for(const fs::path& image_path);

struct LoadedSection {
  std::string id;
  SectionRecord record;
};

/// Reads the manifest's records of the requested split ("train", "test" or
/// "all") in manifest order.
std::vector<LoadedSection> load_manifest_sections(const fs::path& manifest_path, const std::string& split);

struct TrainOptions {
  fs::path config_path;
  std::vector<std::string> overrides;
  bool has_seed = false;
  std::uint64_t seed = 0;
  fs::path out_dir;
};

/// Writes model.sbre, loss.csv, config.json and periodic
/// checkpoint_<step>.sbre files. On divergence the pre-divergence weights go
/// to last_good.sbre and the TrainingDiverged propagates.
std::vector<StepRecord> cmd_train(const TrainOptions& options);

struct InferOptions {
  fs::path checkpoint;
  std::vector<fs::path> images;
  fs::path manifest;           // alternative to `images`
  std::string split = "test";  // with `manifest`
  fs::path out_dir;
};

struct InferSummary {
  std::size_t processed = 0;
  std::vector<std::string> skipped;
};

/// Per image: <id>_det.json, <id>_overlay.png and <id>_pred.png.
InferSummary cmd_infer(const InferOptions& options);

struct EvaluateOptions {
  fs::path manifest;
  fs::path predictions;  // <id>_det.json, else <id>_pred.png, else <id>_lbl.png (profile colors)
  std::string name = "brainseg";
  std::vector<std::pair<std::string, fs::path>> compare;
  std::string split = "test";
  double iou_threshold = 0.5;
  ApAveraging averaging = ApAveraging::kClassMean;
  fs::path out_dir;
};

/// Writes eval.json plus the comparison report CSVs. Every section of the
/// split needs a prediction and no prediction may fall outside it.
std::vector<NamedResult> cmd_evaluate(const EvaluateOptions& options);

nlohmann::json eval_result_to_json(const EvalResult& result, const RegionProfile& profile);

/// Worker cap from SEBRE_THREADS, applied to OpenMP; no-op when unset.
void apply_thread_limit();

}  // namespace brainseg
