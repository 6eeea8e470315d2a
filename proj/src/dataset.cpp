#include "brainseg/dataset.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "brainseg/errors.hpp"

namespace brainseg {

using nlohmann::json;

RgbImage::RgbImage(int h, int w, Rgb fill) : height(h), width(w), pixels(3 * static_cast<std::size_t>(h) * w) {
  for (std::size_t i = 0; i < pixels.size(); i += 3) {
    pixels[i] = fill.r;
    pixels[i + 1] = fill.g;
    pixels[i + 2] = fill.b;
  }
}

// ---------------------------------------------------------------- PNG

RgbImage read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw RuntimeFailure("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  RgbImage out(static_cast<int>(img.height), static_cast<int>(img.width));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw RuntimeFailure("cannot decode PNG " + path.string() + ": " + msg);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw RuntimeFailure("cannot write PNG " + path.string() + ": " + img.message);
  }
}

// ---------------------------------------------------------------- profiles

void RegionProfile::validate() const {
  if (classes.empty()) throw ConfigError("profile " + name + ": no classes");
  if (classes.size() != colors.size()) throw ConfigError("profile " + name + ": classes and colors differ in count");
  std::set<Rgb> seen{background};
  for (std::size_t i = 0; i < colors.size(); ++i) {
    if (!seen.insert(colors[i]).second) {
      throw ConfigError("profile " + name + ": color of '" + classes[i] + "' is not unique");
    }
  }
}

RegionProfile RegionProfile::builtin(const std::string& name) {
  RegionProfile p;
  p.name = name;
  if (name == "mouse8") {
    p.classes = {"isocortex", "hippocampus", "basal ganglia", "thalamus",
                 "prethalamus", "midbrain", "telencephalic vesicle", "hindbrain"};
    p.colors = {{230, 25, 75}, {60, 180, 75}, {255, 225, 25}, {0, 130, 200},
                {245, 130, 48}, {145, 30, 180}, {70, 240, 240}, {240, 50, 230}};
  } else if (name == "hippo4") {
    p.classes = {"CA1", "CA2", "CA3", "DG"};
    p.colors = {{230, 25, 75}, {60, 180, 75}, {0, 130, 200}, {255, 225, 25}};
  } else if (name == "human8") {
    p.classes = {"caudate (left)", "caudate (right)", "thalamus (left)", "thalamus (right)",
                 "putamen (left)", "putamen (right)", "pallidum (left)", "pallidum (right)"};
    p.colors = {{230, 25, 75}, {250, 120, 150}, {0, 130, 200}, {100, 190, 255},
                {60, 180, 75}, {170, 255, 195}, {245, 130, 48}, {255, 215, 180}};
  } else {
    throw ConfigError("unknown profile '" + name + "' (expected mouse8, hippo4 or human8)");
  }
  p.validate();
  return p;
}

void to_json(json& j, const RegionProfile& p) {
  json regions = json::array();
  for (std::size_t i = 0; i < p.classes.size(); ++i) {
    regions.push_back({{"name", p.classes[i]}, {"rgb", {p.colors[i].r, p.colors[i].g, p.colors[i].b}}});
  }
  j = json{{"name", p.name},
           {"version", p.version},
           {"background", {p.background.r, p.background.g, p.background.b}},
           {"regions", regions}};
}

namespace {

Rgb parse_rgb(const json& j) {
  const auto v = j.get<std::vector<int>>();
  if (v.size() != 3 || std::any_of(v.begin(), v.end(), [](int c) { return c < 0 || c > 255; })) {
    throw ConfigError("color must be three integers in [0,255]");
  }
  return {static_cast<std::uint8_t>(v[0]), static_cast<std::uint8_t>(v[1]), static_cast<std::uint8_t>(v[2])};
}

}  // namespace

void from_json(const json& j, RegionProfile& p) {
  p.name = j.at("name").get<std::string>();
  p.version = j.value("version", 1);
  if (j.contains("background")) p.background = parse_rgb(j.at("background"));
  p.classes.clear();
  p.colors.clear();
  for (const auto& r : j.at("regions")) {
    p.classes.push_back(r.at("name").get<std::string>());
    p.colors.push_back(parse_rgb(r.at("rgb")));
  }
  p.validate();
}

RegionProfile load_profile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot open profile " + path.string());
  try {
    return json::parse(in).get<RegionProfile>();
  } catch (const json::exception& e) {
    throw ConfigError("profile " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- masks

namespace {

constexpr int kSnapDistance = 8;

bool near(Rgb a, Rgb b) {
  return std::abs(a.r - b.r) <= kSnapDistance && std::abs(a.g - b.g) <= kSnapDistance &&
         std::abs(a.b - b.b) <= kSnapDistance;
}

std::string rgb_str(Rgb c) {
  return "(" + std::to_string(c.r) + "," + std::to_string(c.g) + "," + std::to_string(c.b) + ")";
}

std::vector<Box> tight_boxes(const std::vector<Mask>& masks) {
  std::vector<Box> out;
  for (const Mask& m : masks) out.push_back(m.bounding_box());
  return out;
}

}  // namespace

InstanceMasks extract_instance_masks(const RgbImage& label, const RegionProfile& profile,
                                     std::size_t unknown_tolerance) {
  const int k = profile.num_classes();
  // -1 background, -2 unknown, else class index.
  std::map<Rgb, int> cache;
  std::map<Rgb, std::size_t> unknown;
  std::vector<Mask> masks(k, Mask(label.height, label.width));
  std::vector<bool> present(k, false);
  for (int y = 0; y < label.height; ++y) {
    for (int x = 0; x < label.width; ++x) {
      const Rgb c = label.at(y, x);
      auto it = cache.find(c);
      if (it == cache.end()) {
        int match = c == profile.background ? -1 : -2;
        for (int i = 0; i < k && match == -2; ++i) {
          if (profile.colors[i] == c) match = i;
        }
        if (match == -2) {
          int hits = near(c, profile.background) ? 1 : 0;
          int cand = -1;
          for (int i = 0; i < k; ++i) {
            if (near(c, profile.colors[i])) {
              ++hits;
              cand = i;
            }
          }
          if (hits == 1) match = cand;
        }
        it = cache.emplace(c, match).first;
      }
      if (it->second >= 0) {
        masks[it->second].at(y, x) = 1;
        present[it->second] = true;
      } else if (it->second == -2) {
        ++unknown[c];
      }
    }
  }
  std::size_t n_unknown = 0;
  for (const auto& [c, n] : unknown) n_unknown += n;
  if (n_unknown > unknown_tolerance) {
    std::string msg = "label raster has " + std::to_string(n_unknown) + " pixels of unknown colors:";
    int listed = 0;
    for (const auto& [c, n] : unknown) {
      if (listed++ == 10) {
        msg += " ...";
        break;
      }
      msg += " " + rgb_str(c) + "x" + std::to_string(n);
    }
    throw ValidationError(msg);
  }
  InstanceMasks out;
  for (int i = 0; i < k; ++i) {
    if (!present[i]) continue;
    out.masks.push_back(std::move(masks[i]));
    out.class_ids.push_back(i + 1);
  }
  return out;
}

RgbImage render_label(const std::vector<Mask>& masks, const std::vector<int>& class_ids,
                      const RegionProfile& profile, int height, int width) {
  RgbImage out(height, width, profile.background);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const Rgb c = profile.colors.at(class_ids.at(i) - 1);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        if (masks[i].at(y, x)) out.set(y, x, c);
      }
    }
  }
  return out;
}

SectionRecord make_record(RgbImage image, const RgbImage& label, const RegionProfile& profile, std::string source_id,
                          std::size_t unknown_tolerance) {
  if (image.height != label.height || image.width != label.width) {
    throw ValidationError("section " + source_id + ": image and label extents differ");
  }
  InstanceMasks inst = extract_instance_masks(label, profile, unknown_tolerance);
  SectionRecord r;
  r.image = std::move(image);
  r.masks = std::move(inst.masks);
  r.class_ids = std::move(inst.class_ids);
  r.boxes = tight_boxes(r.masks);
  r.source_id = std::move(source_id);
  return r;
}

std::vector<std::string> validate_record(const SectionRecord& r) {
  std::vector<std::string> problems;
  const std::string id = "record " + r.source_id + " (rot " + std::to_string(r.rotation_deg) +
                         (r.flipped ? ", flipped" : "") + ")";
  if (r.image.height <= 0 || r.image.width <= 0) problems.push_back(id + ": empty image");
  if (r.masks.size() != r.class_ids.size() || r.masks.size() != r.boxes.size()) {
    problems.push_back(id + ": masks, class ids and boxes differ in count");
    return problems;
  }
  std::set<int> classes;
  for (std::size_t i = 0; i < r.masks.size(); ++i) {
    const Mask& m = r.masks[i];
    if (m.height != r.image.height || m.width != r.image.width) problems.push_back(id + ": mask extent mismatch");
    if (m.empty()) problems.push_back(id + ": empty mask for class " + std::to_string(r.class_ids[i]));
    if (!classes.insert(r.class_ids[i]).second) {
      problems.push_back(id + ": class " + std::to_string(r.class_ids[i]) + " appears twice");
    }
    if (!(r.boxes[i] == m.bounding_box())) problems.push_back(id + ": box is not the tight mask box");
  }
  return problems;
}

// ---------------------------------------------------------------- augmentation

SectionRecord rotate_record(const SectionRecord& r, double degrees, Rgb fill) {
  const int h = r.image.height, w = r.image.width;
  const double th = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double cy = 0.5 * h, cx = 0.5 * w;

  SectionRecord out = r;
  out.rotation_deg = r.rotation_deg + static_cast<int>(std::lround(degrees));
  out.image = RgbImage(h, w, fill);
  std::vector<Mask> masks(r.masks.size(), Mask(h, w));
  const double fillv[3] = {static_cast<double>(fill.r), static_cast<double>(fill.g), static_cast<double>(fill.b)};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      // Source position of this output pixel center.
      const double sx = cx + dx * c - dy * s, sy = cy + dx * s + dy * c;
      const int nx = static_cast<int>(std::floor(sx)), ny = static_cast<int>(std::floor(sy));
      if (nx >= 0 && nx < w && ny >= 0 && ny < h) {
        for (std::size_t i = 0; i < masks.size(); ++i) masks[i].at(y, x) = r.masks[i].at(ny, nx);
      }
      const double u = sx - 0.5, v = sy - 0.5;
      const int x0 = static_cast<int>(std::floor(u)), y0 = static_cast<int>(std::floor(v));
      const double fx = u - x0, fy = v - y0;
      double acc[3] = {0, 0, 0};
      for (int k = 0; k < 4; ++k) {
        const int yy = y0 + (k >> 1), xx = x0 + (k & 1);
        const double wt = ((k >> 1) ? fy : 1 - fy) * ((k & 1) ? fx : 1 - fx);
        if (wt == 0.0) continue;
        const bool inside = xx >= 0 && xx < w && yy >= 0 && yy < h;
        const Rgb p = inside ? r.image.at(yy, xx) : fill;
        acc[0] += wt * (inside ? p.r : fillv[0]);
        acc[1] += wt * (inside ? p.g : fillv[1]);
        acc[2] += wt * (inside ? p.b : fillv[2]);
      }
      out.image.set(y, x, {static_cast<std::uint8_t>(std::clamp(std::lround(acc[0]), 0L, 255L)),
                           static_cast<std::uint8_t>(std::clamp(std::lround(acc[1]), 0L, 255L)),
                           static_cast<std::uint8_t>(std::clamp(std::lround(acc[2]), 0L, 255L))});
    }
  }
  out.masks.clear();
  out.class_ids.clear();
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i].empty()) continue;
    out.masks.push_back(std::move(masks[i]));
    out.class_ids.push_back(r.class_ids[i]);
  }
  out.boxes = tight_boxes(out.masks);
  return out;
}

SectionRecord flip_record(const SectionRecord& r) {
  SectionRecord out = r;
  out.flipped = !r.flipped;
  const int h = r.image.height, w = r.image.width;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) out.image.set(y, x, r.image.at(y, w - 1 - x));
  }
  for (std::size_t i = 0; i < r.masks.size(); ++i) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) out.masks[i].at(y, x) = r.masks[i].at(y, w - 1 - x);
    }
  }
  out.boxes = tight_boxes(out.masks);
  return out;
}

std::vector<SectionRecord> augment_rotations(const SectionRecord& record, int min_deg, int max_deg, int step_deg,
                                             bool include_flip, bool include_zero) {
  if (step_deg <= 0 || max_deg < min_deg || (max_deg - min_deg) % step_deg != 0) {
    throw ValidationError("augment_rotations: step " + std::to_string(step_deg) + " does not divide [" +
                          std::to_string(min_deg) + ", " + std::to_string(max_deg) + "]");
  }
  std::vector<const SectionRecord*> bases{&record};
  SectionRecord mirrored;
  if (include_flip) {
    mirrored = flip_record(record);
    bases.push_back(&mirrored);
  }
  std::vector<SectionRecord> out;
  for (const SectionRecord* base : bases) {
    for (int deg = min_deg; deg <= max_deg; deg += step_deg) {
      if (deg == 0 && !include_zero) continue;
      out.push_back(rotate_record(*base, deg));
    }
  }
  return out;
}

SectionRecord downsample(const SectionRecord& r, double factor, std::vector<std::string>* warnings) {
  if (!(factor > 0.0) || factor > 1.0) throw ValidationError("downsample: factor must be in (0, 1]");
  if (factor == 1.0) return r;
  const int h = r.image.height, w = r.image.width;
  const int oh = static_cast<int>(std::lround(h * factor)), ow = static_cast<int>(std::lround(w * factor));
  if (oh < 1 || ow < 1) throw ValidationError("downsample: output would be empty");
  const double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;

  // Source spans of each output row/column with their overlap weights.
  struct Span {
    int begin, end;
    std::vector<double> weight;
  };
  auto spans = [](int n_out, double scale, int n_in) {
    std::vector<Span> out(n_out);
    for (int o = 0; o < n_out; ++o) {
      const double a = o * scale, b = (o + 1) * scale;
      Span sp{static_cast<int>(std::floor(a)), std::min(n_in, static_cast<int>(std::ceil(b))), {}};
      for (int i = sp.begin; i < sp.end; ++i) {
        sp.weight.push_back(std::min<double>(b, i + 1) - std::max<double>(a, i));
      }
      out[o] = std::move(sp);
    }
    return out;
  };
  const auto ys = spans(oh, sy, h), xs = spans(ow, sx, w);

  SectionRecord out = r;
  out.image = RgbImage(oh, ow);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc[3] = {0, 0, 0}, total = 0;
      for (int i = ys[y].begin; i < ys[y].end; ++i) {
        for (int j = xs[x].begin; j < xs[x].end; ++j) {
          const double wt = ys[y].weight[i - ys[y].begin] * xs[x].weight[j - xs[x].begin];
          const Rgb p = r.image.at(i, j);
          acc[0] += wt * p.r;
          acc[1] += wt * p.g;
          acc[2] += wt * p.b;
          total += wt;
        }
      }
      out.image.set(y, x, {static_cast<std::uint8_t>(std::lround(acc[0] / total)),
                           static_cast<std::uint8_t>(std::lround(acc[1] / total)),
                           static_cast<std::uint8_t>(std::lround(acc[2] / total))});
    }
  }
  out.masks.clear();
  out.class_ids.clear();
  for (std::size_t k = 0; k < r.masks.size(); ++k) {
    Mask m(oh, ow);
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        bool any = false;
        for (int i = ys[y].begin; i < ys[y].end && !any; ++i) {
          if (ys[y].weight[i - ys[y].begin] <= 0) continue;
          for (int j = xs[x].begin; j < xs[x].end && !any; ++j) {
            any = xs[x].weight[j - xs[x].begin] > 0 && r.masks[k].at(i, j);
          }
        }
        m.at(y, x) = any;
      }
    }
    if (m.empty()) {
      if (warnings) {
        warnings->push_back("record " + r.source_id + ": class " + std::to_string(r.class_ids[k]) +
                            " vanished after downsampling");
      }
      continue;
    }
    out.masks.push_back(std::move(m));
    out.class_ids.push_back(r.class_ids[k]);
  }
  out.boxes = tight_boxes(out.masks);
  return out;
}

// ---------------------------------------------------------------- splits

void to_json(json& j, const DatasetManifest& m) {
  json records = json::array();
  for (const auto& e : m.records) {
    records.push_back({{"source_id", e.source_id},
                       {"image_path", e.image_path},
                       {"label_path", e.label_path},
                       {"rotation_deg", e.rotation_deg},
                       {"flipped", e.flipped},
                       {"split", e.split == Split::kTrain ? "train" : "test"}});
  }
  j = json{{"profile", m.profile}, {"downsample_factor", m.downsample_factor}, {"records", records}};
}

void from_json(const json& j, DatasetManifest& m) {
  m.profile = j.at("profile").get<std::string>();
  m.downsample_factor = j.value("downsample_factor", 1.0);
  m.records.clear();
  for (const auto& r : j.at("records")) {
    ManifestEntry e;
    e.source_id = r.at("source_id").get<std::string>();
    e.image_path = r.at("image_path").get<std::string>();
    e.label_path = r.at("label_path").get<std::string>();
    e.rotation_deg = r.value("rotation_deg", 0);
    e.flipped = r.value("flipped", false);
    const auto split = r.at("split").get<std::string>();
    if (split != "train" && split != "test") throw ValidationError("manifest: split must be train or test");
    e.split = split == "train" ? Split::kTrain : Split::kTest;
    m.records.push_back(std::move(e));
  }
}

std::size_t train_source_count(std::size_t sources, double train_fraction) {
  // The epsilon keeps exact products such as (2/3)*30 from rounding up.
  return static_cast<std::size_t>(std::ceil(train_fraction * static_cast<double>(sources) - 1e-9));
}

DatasetManifest split_dataset(std::vector<SectionRecord>& records, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ValidationError("split_dataset: train fraction must be in (0,1)");
  }
  std::set<std::string> ids;
  for (const auto& r : records) ids.insert(r.source_id);
  if (ids.size() < 2) throw ValidationError("split_dataset: need at least 2 source ids, got " + std::to_string(ids.size()));
  std::vector<std::string> order(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  const std::size_t n_train = train_source_count(order.size(), train_fraction);
  const std::set<std::string> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));

  DatasetManifest m;
  for (auto& r : records) {
    r.split = train.count(r.source_id) ? Split::kTrain : Split::kTest;
    m.records.push_back({r.source_id, "", "", r.rotation_deg, r.flipped, r.split});
  }
  return m;
}

// ---------------------------------------------------------------- phantoms

PhantomPair generate_phantom(const RegionProfile& profile, std::uint64_t seed, int height, int width) {
  if (height < 128 || width < 128) throw ValidationError("generate_phantom: extent must be at least 128x128");
  profile.validate();
  const int k = profile.num_classes();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  auto between = [&](double a, double b) { return a + (b - a) * uni(rng); };
  constexpr double kTwoPi = 2.0 * std::numbers::pi;

  // Section outline.
  const double ecy = height * between(0.48, 0.52), ecx = width * between(0.48, 0.52);
  const double ery = height * between(0.40, 0.44), erx = width * between(0.41, 0.45);

  // Layout: classes fill rows of a grid spanning the outline.
  const int rows = std::max(1, static_cast<int>(std::lround(std::sqrt(static_cast<double>(k)))));
  struct Blob {
    double cy, cx, radius, aspect, a2, p2, a3, p3;
    double base, contrast, freq, angle, phase;
  };
  std::vector<Blob> blobs;
  int placed = 0;
  for (int row = 0; row < rows; ++row) {
    const int in_row = (k - placed + (rows - row) - 1) / (rows - row);
    const double v = rows == 1 ? 0.0 : -0.55 + 1.1 * row / (rows - 1);
    const double row_gap = rows == 1 ? 2.0 * ery : 1.1 * ery / (rows - 1);
    const double col_gap = in_row == 1 ? 2.0 * erx : 1.1 * erx / (in_row - 1);
    const double spacing = std::min(row_gap, col_gap);
    for (int col = 0; col < in_row; ++col, ++placed) {
      const double u = in_row == 1 ? 0.0 : -0.55 + 1.1 * col / (in_row - 1);
      const int i = placed;
      Blob b;
      b.cy = ecy + v * ery + between(-0.05, 0.05) * ery;
      b.cx = ecx + u * erx + between(-0.05, 0.05) * erx;
      b.radius = 0.38 * spacing * between(0.85, 1.15);
      b.aspect = between(0.85, 1.18);
      b.a2 = between(0.0, 0.10);
      b.p2 = between(0.0, kTwoPi);
      b.a3 = between(0.0, 0.08);
      b.p3 = between(0.0, kTwoPi);
      // Class-specific texture statistics; the permutations decorrelate
      // brightness, frequency and contrast across classes.
      const double denom = std::max(1, k - 1);
      b.base = 0.45 + 0.45 * i / denom + between(-0.015, 0.015);
      b.freq = 0.04 + 0.16 * ((i * 5) % k) / denom;
      b.contrast = 0.04 + 0.06 * ((i * 3) % k) / denom;
      b.angle = between(0.0, std::numbers::pi);
      b.phase = between(0.0, kTwoPi);
      blobs.push_back(b);
    }
  }
  const double tissue_phase = between(0.0, kTwoPi);
  std::normal_distribution<double> noise(0.0, 0.02);

  PhantomPair out{RgbImage(height, width), RgbImage(height, width, profile.background)};
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double py = y + 0.5, px = x + 0.5;
      const double ey = (py - ecy) / ery, ex = (px - ecx) / erx;
      double value = 0.0;
      int region = -1;
      if (ey * ey + ex * ex <= 1.0) {
        value = 0.28 + 0.03 * std::sin(0.05 * px + 0.03 * py + tissue_phase);
        for (int i = 0; i < k && region < 0; ++i) {
          const Blob& b = blobs[i];
          const double dy = (py - b.cy) * b.aspect, dx = (px - b.cx) / b.aspect;
          const double t = std::atan2(dy, dx);
          const double r = b.radius * (1.0 + b.a2 * std::sin(2 * t + b.p2) + b.a3 * std::sin(3 * t + b.p3));
          if (dy * dy + dx * dx <= r * r) region = i;
        }
        if (region >= 0) {
          const Blob& b = blobs[region];
          const double along = px * std::cos(b.angle) + py * std::sin(b.angle);
          value = b.base + b.contrast * std::sin(kTwoPi * b.freq * along + b.phase);
        }
        value += noise(rng);
      }
      const auto g = static_cast<std::uint8_t>(std::clamp(std::lround(255.0 * value), 0L, 255L));
      out.image.set(y, x, {g, g, g});
      if (region >= 0) out.label.set(y, x, profile.colors[region]);
    }
  }
  return out;
}

// ---------------------------------------------------------------- tensors

nn::Tensor<float> to_tensor(const RgbImage& image) {
  nn::Tensor<float> t({3, image.height, image.width});
  const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) t[c * plane + i] = image.pixels[3 * i + c] / 255.0f;
  }
  return t;
}

TrainingExample to_training_example(const SectionRecord& r, int multiple) {
  const int h = r.image.height, w = r.image.width;
  const int ph = (h + multiple - 1) / multiple * multiple, pw = (w + multiple - 1) / multiple * multiple;
  TrainingExample ex;
  ex.image = nn::Tensor<float>({3, ph, pw});
  const nn::Tensor<float> src = to_tensor(r.image);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      std::copy_n(src.data() + (static_cast<std::size_t>(c) * h + y) * w, w,
                  ex.image.data() + (static_cast<std::size_t>(c) * ph + y) * pw);
    }
  }
  for (const Mask& m : r.masks) {
    Mask p(ph, pw);
    for (int y = 0; y < h; ++y) std::copy_n(&m.bits[static_cast<std::size_t>(y) * w], w, &p.bits[static_cast<std::size_t>(y) * pw]);
    ex.masks.push_back(std::move(p));
  }
  ex.boxes = r.boxes;
  ex.class_ids = r.class_ids;
  return ex;
}

}  // namespace brainseg
