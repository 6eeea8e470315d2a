#include "brainseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "brainseg/errors.hpp"

namespace brainseg {

namespace {

void require_same_shape(int h1, int w1, int h2, int w2, const char* what) {
  if (h1 != h2 || w1 != w2) {
    std::ostringstream os;
    os << what << ": shape mismatch " << h1 << "x" << w1 << " vs " << h2 << "x" << w2;
    throw ValidationError(os.str());
  }
}

constexpr double kFar = 1e20;

// Felzenszwalb-Huttenlocher lower envelope of parabolas, in place on f.
void edt_1d(std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    auto meet = [&](int p) { return ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p)); };
    double s = meet(v[k]);
    while (s <= z[k]) s = meet(v[--k]);
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
  f = d;
}

// Squared Euclidean distance from every pixel to the nearest set pixel.
std::vector<double> squared_distance_field(const Mask& sites) {
  const int h = sites.height, w = sites.width;
  std::vector<double> field(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < field.size(); ++i) field[i] = sites.bits[i] ? 0.0 : kFar;
  const int n = std::max(h, w);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);
  f.resize(h);
  d.resize(h);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = field[static_cast<std::size_t>(y) * w + x];
    edt_1d(f, d, v, z);
    for (int y = 0; y < h; ++y) field[static_cast<std::size_t>(y) * w + x] = f[y];
  }
  f.resize(w);
  d.resize(w);
  for (int y = 0; y < h; ++y) {
    std::copy_n(field.begin() + static_cast<std::ptrdiff_t>(y) * w, w, f.begin());
    edt_1d(f, d, v, z);
    std::copy_n(f.begin(), w, field.begin() + static_cast<std::ptrdiff_t>(y) * w);
  }
  return field;
}

}  // namespace

Mask contour(const Mask& mask) {
  Mask out(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y == mask.height - 1 || x == mask.width - 1 || !mask.at(y - 1, x) ||
                        !mask.at(y + 1, x) || !mask.at(y, x - 1) || !mask.at(y, x + 1);
      out.at(y, x) = edge ? 1 : 0;
    }
  }
  return out;
}

OverlapMetrics mask_overlap_metrics(const Mask& pred, const Mask& gt) {
  require_same_shape(pred.height, pred.width, gt.height, gt.width, "mask_overlap_metrics");
  const std::size_t g = gt.count();
  if (g == 0) throw ValidationError("mask_overlap_metrics: ground-truth mask is empty");
  const std::size_t p = pred.count();
  OverlapMetrics m;
  if (p == 0) {
    m.hausdorff = m.cmd = std::hypot(double(gt.height), double(gt.width));
    return m;
  }
  std::size_t inter = 0;
  for (std::size_t i = 0; i < gt.bits.size(); ++i) inter += (pred.bits[i] && gt.bits[i]) ? 1 : 0;
  m.dice = 2.0 * double(inter) / double(p + g);

  const Mask cp = contour(pred), cg = contour(gt);
  const auto to_g = squared_distance_field(cg);
  const auto to_p = squared_distance_field(cp);
  double sum = 0.0, worst = 0.0;
  std::size_t n = 0;
  for (const auto& [c, field] : {std::pair{&cp, &to_g}, std::pair{&cg, &to_p}}) {
    for (std::size_t i = 0; i < c->bits.size(); ++i) {
      if (!c->bits[i]) continue;
      const double dist = std::sqrt((*field)[i]);
      sum += dist;
      worst = std::max(worst, dist);
      ++n;
    }
  }
  m.hausdorff = worst;
  m.cmd = sum / double(n);
  return m;
}

double mask_mse(const LabelRaster& pred, const LabelRaster& gt) {
  require_same_shape(pred.height, pred.width, gt.height, gt.width, "mask_mse");
  if (gt.codes.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < gt.codes.size(); ++i) {
    const double d = double(pred.codes[i]) - double(gt.codes[i]);
    sum += d * d;
  }
  return sum / double(gt.codes.size());
}

double mask_iou(const Mask& a, const Mask& b) {
  require_same_shape(a.height, a.width, b.height, b.width, "mask_iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    inter += (a.bits[i] && b.bits[i]) ? 1 : 0;
    uni += (a.bits[i] || b.bits[i]) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

namespace {

struct Ranked {
  double score;
  std::size_t section;
  std::size_t index;
};

// All-point interpolated AP for one class over the given sections.
double class_ap(int cls, const std::vector<std::vector<Detection>>& dets,
                const std::vector<std::vector<Instance>>& gt, const std::vector<std::size_t>& sections,
                double thr) {
  std::size_t n_gt = 0;
  std::vector<Ranked> ranked;
  for (std::size_t s : sections) {
    for (const auto& inst : gt[s]) n_gt += inst.class_id == cls ? 1 : 0;
    for (std::size_t i = 0; i < dets[s].size(); ++i) {
      if (dets[s][i].class_id == cls) ranked.push_back({dets[s][i].score, s, i});
    }
  }
  if (n_gt == 0) return 0.0;
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> used(gt.size());
  for (std::size_t s : sections) used[s].assign(gt[s].size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const auto& det = dets[ranked[r].section][ranked[r].index];
    const auto& truth = gt[ranked[r].section];
    double best = -1.0;
    std::size_t best_j = truth.size();
    for (std::size_t j = 0; j < truth.size(); ++j) {
      if (truth[j].class_id != cls || used[ranked[r].section][j]) continue;
      const double iou = mask_iou(det.mask, truth[j].mask);
      if (iou > best) {
        best = iou;
        best_j = j;
      }
    }
    if (best_j < truth.size() && best >= thr) {
      used[ranked[r].section][best_j] = true;
      ++tp;
    }
    precision.push_back(double(tp) / double(r + 1));
    recall.push_back(double(tp) / double(n_gt));
  }
  // Precision envelope, then area under the step curve.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

std::set<int> gt_classes(const std::vector<std::vector<Instance>>& gt, const std::vector<std::size_t>& sections) {
  std::set<int> classes;
  for (std::size_t s : sections) {
    for (const auto& inst : gt[s]) classes.insert(inst.class_id);
  }
  return classes;
}

}  // namespace

ApResult average_precision(const std::vector<std::vector<Detection>>& detections,
                           const std::vector<std::vector<Instance>>& ground_truth, double iou_threshold,
                           ApAveraging averaging) {
  if (detections.size() != ground_truth.size()) {
    throw ValidationError("average_precision: " + std::to_string(detections.size()) + " detection lists for " +
                          std::to_string(ground_truth.size()) + " sections");
  }
  std::vector<std::size_t> all(ground_truth.size());
  std::iota(all.begin(), all.end(), std::size_t{0});

  ApResult result;
  for (int c : gt_classes(ground_truth, all)) {
    result.per_class[c] = class_ap(c, detections, ground_truth, all, iou_threshold);
  }
  if (averaging == ApAveraging::kClassMean) {
    if (!result.per_class.empty()) {
      double sum = 0.0;
      for (const auto& [c, ap] : result.per_class) sum += ap;
      result.mean = sum / double(result.per_class.size());
    }
    return result;
  }
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t s : all) {
    const auto classes = gt_classes(ground_truth, {s});
    if (classes.empty()) continue;
    double section_sum = 0.0;
    for (int c : classes) section_sum += class_ap(c, detections, ground_truth, {s}, iou_threshold);
    sum += section_sum / double(classes.size());
    ++counted;
  }
  result.mean = counted ? sum / double(counted) : 0.0;
  return result;
}

LabelRaster detections_to_raster(const std::vector<Detection>& detections, int height, int width) {
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].score < detections[b].score; });
  LabelRaster out(height, width);
  for (std::size_t i : order) {
    const auto& m = detections[i].mask;
    require_same_shape(m.height, m.width, height, width, "detections_to_raster");
    for (std::size_t p = 0; p < m.bits.size(); ++p) {
      if (m.bits[p]) out.codes[p] = detections[i].class_id;
    }
  }
  return out;
}

LabelRaster instances_to_raster(const std::vector<Instance>& instances, int height, int width) {
  LabelRaster out(height, width);
  for (const auto& inst : instances) {
    require_same_shape(inst.mask.height, inst.mask.width, height, width, "instances_to_raster");
    for (std::size_t p = 0; p < inst.mask.bits.size(); ++p) {
      if (inst.mask.bits[p]) out.codes[p] = inst.class_id;
    }
  }
  return out;
}

EvalResult evaluate(const std::vector<std::string>& section_ids,
                    const std::vector<std::vector<Detection>>& detections,
                    const std::vector<std::vector<Instance>>& ground_truth, double iou_threshold,
                    ApAveraging averaging) {
  if (section_ids.size() != ground_truth.size() || detections.size() != ground_truth.size()) {
    throw ValidationError("evaluate: section ids, detections and ground truth differ in length");
  }
  EvalResult out;
  const ApResult ap = average_precision(detections, ground_truth, iou_threshold, averaging);
  out.mean_ap = ap.mean;
  for (const auto& [c, v] : ap.per_class) out.per_class[c].ap = v;

  for (std::size_t s = 0; s < ground_truth.size(); ++s) {
    if (ground_truth[s].empty()) {
      throw ValidationError("evaluate: section " + section_ids[s] + " has no ground-truth instances");
    }
    const int h = ground_truth[s].front().mask.height, w = ground_truth[s].front().mask.width;
    for (const auto& inst : ground_truth[s]) {
      const Detection* best = nullptr;
      for (const auto& d : detections[s]) {
        if (d.class_id == inst.class_id && (!best || d.score > best->score)) best = &d;
      }
      const Mask empty(h, w);
      const OverlapMetrics m = mask_overlap_metrics(best ? best->mask : empty, inst.mask);
      ClassScores& cs = out.per_class[inst.class_id];
      cs.dice += m.dice;
      cs.hausdorff += m.hausdorff;
      cs.cmd += m.cmd;
      cs.instances += 1;
      cs.empty_predictions += (!best || best->mask.empty()) ? 1 : 0;
    }
    const double mse =
        mask_mse(detections_to_raster(detections[s], h, w), instances_to_raster(ground_truth[s], h, w));
    if (!out.per_section_mse.emplace(section_ids[s], mse).second) {
      throw ValidationError("evaluate: duplicate section id " + section_ids[s]);
    }
  }
  for (auto& [c, cs] : out.per_class) {
    if (cs.instances == 0) continue;
    cs.dice /= cs.instances;
    cs.hausdorff /= cs.instances;
    cs.cmd /= cs.instances;
  }
  return out;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ValidationError("pearson: vectors differ in length");
  if (a == b && !a.empty()) return 1.0;
  const double n = double(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os.precision(6);
  os << v;
  return os.str();
}

std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot write " + path.string());
  return f;
}

}  // namespace

void comparison_report(const std::vector<NamedResult>& results, const std::vector<std::string>& class_names,
                       const std::filesystem::path& out_dir) {
  if (results.empty()) throw ValidationError("comparison_report: no results");
  const auto& ref = results.front().result.per_section_mse;
  for (std::size_t m = 1; m < results.size(); ++m) {
    const auto& other = results[m].result.per_section_mse;
    std::vector<std::string> only_ref, only_other;
    for (const auto& [id, v] : ref) {
      if (!other.count(id)) only_ref.push_back(id);
    }
    for (const auto& [id, v] : other) {
      if (!ref.count(id)) only_other.push_back(id);
    }
    if (!only_ref.empty() || !only_other.empty()) {
      std::ostringstream os;
      os << "comparison_report: section sets differ between " << results.front().name << " and " << results[m].name
         << ";";
      for (const auto& id : only_ref) os << " only in " << results.front().name << ": " << id << ";";
      for (const auto& id : only_other) os << " only in " << results[m].name << ": " << id << ";";
      throw ValidationError(os.str());
    }
  }
  std::filesystem::create_directories(out_dir);

  std::set<int> classes;
  for (const auto& r : results) {
    for (const auto& [c, s] : r.result.per_class) classes.insert(c);
  }
  auto region_name = [&](int c) {
    return c >= 1 && c <= int(class_names.size()) ? class_names[c - 1] : "class" + std::to_string(c);
  };

  struct Metric {
    const char* name;
    double ClassScores::*field;
    bool higher_better;
  };
  const Metric metrics[] = {{"ap", &ClassScores::ap, true},
                            {"dice", &ClassScores::dice, true},
                            {"hausdorff", &ClassScores::hausdorff, false},
                            {"cmd", &ClassScores::cmd, false}};

  {
    auto f = open_csv(out_dir / "table.csv");
    f << "region";
    for (const auto& met : metrics) {
      for (const auto& r : results) f << ',' << quote(r.name + ":" + met.name);
    }
    for (const auto& r : results) f << ',' << quote(r.name + ":empty_predictions");
    f << '\n';
    for (int c : classes) {
      f << quote(region_name(c));
      for (const auto& met : metrics) {
        std::vector<double> vals;
        for (const auto& r : results) {
          const auto it = r.result.per_class.find(c);
          vals.push_back(it == r.result.per_class.end() ? std::numeric_limits<double>::quiet_NaN()
                                                        : it->second.*met.field);
        }
        double best = met.higher_better ? -std::numeric_limits<double>::infinity()
                                        : std::numeric_limits<double>::infinity();
        for (double v : vals) {
          if (!std::isnan(v)) best = met.higher_better ? std::max(best, v) : std::min(best, v);
        }
        for (double v : vals) f << ',' << fmt(v) << (results.size() > 1 && v == best ? "*" : "");
      }
      for (const auto& r : results) {
        const auto it = r.result.per_class.find(c);
        f << ',' << (it == r.result.per_class.end() ? 0 : it->second.empty_predictions);
      }
      f << '\n';
    }
    f << "mean_ap";
    for (const auto& met : metrics) {
      for (const auto& r : results) f << ',' << (std::string(met.name) == "ap" ? fmt(r.result.mean_ap) : "");
    }
    f << std::string(results.size(), ',') << '\n';
  }

  std::vector<std::vector<double>> mse;
  for (const auto& r : results) {
    std::vector<double> v;
    for (const auto& [id, x] : r.result.per_section_mse) v.push_back(x);
    mse.push_back(std::move(v));
  }
  if (results.size() > 1) {
    auto f = open_csv(out_dir / "correlation.csv");
    f << "method";
    for (const auto& r : results) f << ',' << quote(r.name);
    f << '\n';
    for (std::size_t a = 0; a < results.size(); ++a) {
      f << quote(results[a].name);
      for (std::size_t b = 0; b < results.size(); ++b) f << ',' << fmt(pearson(mse[a], mse[b]));
      f << '\n';
    }
  }
  {
    auto f = open_csv(out_dir / "mse_sections.csv");
    f << "section,method,mse\n";
    for (const auto& [id, x] : ref) {
      for (const auto& r : results) f << quote(id) << ',' << quote(r.name) << ',' << fmt(r.result.per_section_mse.at(id)) << '\n';
    }
  }
}

}  // namespace brainseg
