#pragma once

// Evaluation: mask overlap and contour distances, class-code MSE, mask AP,
// and comparison reports across methods.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "brainseg/heads.hpp"
#include "brainseg/mask.hpp"

namespace brainseg {

struct OverlapMetrics {
  double dice = 0.0;
  double hausdorff = 0.0;
  double cmd = 0.0;  // mean of all contour-to-contour distances, both ways
};

/// Contour pixels: set pixels with a 4-neighbour outside the mask or the
/// image, which yields an 8-connected boundary.
Mask contour(const Mask& mask);

/// An empty prediction scores dice 0 and distances equal to the image
/// diagonal. Throws ValidationError on shape mismatch or empty `gt`.
OverlapMetrics mask_overlap_metrics(const Mask& pred, const Mask& gt);

/// Class-code raster: 0 background, 1..K profile classes.
struct LabelRaster {
  int height = 0;
  int width = 0;
  std::vector<int> codes;

  LabelRaster() = default;
  LabelRaster(int h, int w) : height(h), width(w), codes(static_cast<std::size_t>(h) * w, 0) {}
  friend bool operator==(const LabelRaster&, const LabelRaster&) = default;
};

double mask_mse(const LabelRaster& pred, const LabelRaster& gt);

struct Instance {
  int class_id = 0;
  Mask mask;
};

enum class ApAveraging {
  kClassMean,    // AP per class over all sections, then mean over classes
  kSectionMean,  // class-mean AP per section, then mean over sections
};

struct ApResult {
  std::map<int, double> per_class;  // classes present in the ground truth
  double mean = 0.0;
};

/// Mask-IoU average precision with all-point interpolation. Within a class,
/// detections are ranked by score (ties: earlier section, then earlier
/// position) and each matches the unmatched same-class instance of its
/// section with the highest IoU, if that IoU reaches `iou_threshold`.
ApResult average_precision(const std::vector<std::vector<Detection>>& detections,
                           const std::vector<std::vector<Instance>>& ground_truth, double iou_threshold = 0.5,
                           ApAveraging averaging = ApAveraging::kClassMean);

double mask_iou(const Mask& a, const Mask& b);

/// Later (higher-score) detections overwrite earlier ones where masks meet.
LabelRaster detections_to_raster(const std::vector<Detection>& detections, int height, int width);
LabelRaster instances_to_raster(const std::vector<Instance>& instances, int height, int width);

struct ClassScores {
  double ap = 0.0;
  double dice = 0.0;
  double hausdorff = 0.0;
  double cmd = 0.0;
  int instances = 0;
  int empty_predictions = 0;  // instances scored with the empty-prediction sentinel
};

struct EvalResult {
  std::map<int, ClassScores> per_class;
  std::map<std::string, double> per_section_mse;
  double mean_ap = 0.0;
};

/// Scores one method. Overlap metrics compare each ground-truth instance
/// with the highest-scoring same-class detection of its section.
EvalResult evaluate(const std::vector<std::string>& section_ids,
                    const std::vector<std::vector<Detection>>& detections,
                    const std::vector<std::vector<Instance>>& ground_truth, double iou_threshold = 0.5,
                    ApAveraging averaging = ApAveraging::kClassMean);

/// Pearson correlation; 1 for identical vectors, NaN when either side is
/// constant otherwise.
double pearson(const std::vector<double>& a, const std::vector<double>& b);

struct NamedResult {
  std::string name;
  EvalResult result;
};

/// Writes <out_dir>/table.csv (region rows, method x metric columns, best
/// value per metric marked with '*'), correlation.csv (pairwise Pearson of
/// per-section MSE) and mse_sections.csv (long-form plot data). Throws
/// ValidationError when the methods cover different sections.
void comparison_report(const std::vector<NamedResult>& results, const std::vector<std::string>& class_names,
                       const std::filesystem::path& out_dir);

}  // namespace brainseg
