#include "brainseg/cli.hpp"

#include <omp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "brainseg/errors.hpp"
#include "brainseg/geometry.hpp"
#include "brainseg/train.hpp"

namespace brainseg {

using nlohmann::json;

// ---------------------------------------------------------------- run config

RunConfig RunConfig::preset_defaults(const std::string& preset) {
  RunConfig c;
  c.preset = preset;
  if (preset == "desk") {
    c.model = ModelConfig::desk();
    c.schedule = Schedule::desk();
  } else if (preset == "paper") {
    c.model = ModelConfig::paper();
    c.schedule = Schedule::paper();
  } else {
    throw ConfigError("config: preset must be 'desk' or 'paper', got '" + preset + "'");
  }
  return c;
}

void RunConfig::validate() const {
  if (preset != "desk" && preset != "paper") throw ConfigError("config: unknown preset '" + preset + "'");
  const RegionProfile p = RegionProfile::builtin(profile);
  model.validate();
  loss.validate();
  schedule.validate();
  if (model.num_classes != p.num_classes() + 1) {
    throw ConfigError("config: model.num_classes is " + std::to_string(model.num_classes) + " but profile " +
                      profile + " needs " + std::to_string(p.num_classes() + 1));
  }
  if (checkpoint_every < 0) throw ConfigError("config: checkpoint_every must be >= 0");
  if (rotation_jitter_deg < 0 || rotation_jitter_deg > 180) {
    throw ConfigError("config: rotation_jitter_deg must be in [0,180]");
  }
  if (!manifest.empty() && !fs::exists(manifest)) throw ConfigError("config: manifest not found: " + manifest);
}

void to_json(json& j, const RunConfig& c) {
  j = json{{"preset", c.preset},
           {"profile", c.profile},
           {"model", c.model},
           {"loss", c.loss},
           {"schedule", c.schedule},
           {"seed", c.seed},
           {"manifest", c.manifest},
           {"checkpoint_every", c.checkpoint_every},
           {"rotation_jitter_deg", c.rotation_jitter_deg}};
}

void from_json(const json& j, RunConfig& c) {
  static const std::set<std::string> known{"preset",   "profile",          "model",
                                           "loss",     "schedule",         "seed",
                                           "manifest", "checkpoint_every", "rotation_jitter_deg"};
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("config: unknown field '" + key + "'");
  }
  if (j.contains("preset")) j.at("preset").get_to(c.preset);
  if (j.contains("profile")) j.at("profile").get_to(c.profile);
  if (j.contains("model")) from_json(j.at("model"), c.model);
  if (j.contains("loss")) from_json(j.at("loss"), c.loss);
  if (j.contains("schedule")) from_json(j.at("schedule"), c.schedule);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("manifest")) j.at("manifest").get_to(c.manifest);
  if (j.contains("checkpoint_every")) j.at("checkpoint_every").get_to(c.checkpoint_every);
  if (j.contains("rotation_jitter_deg")) j.at("rotation_jitter_deg").get_to(c.rotation_jitter_deg);
}

namespace {

std::pair<std::string, json> parse_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + text + "': expected path=value");
  const std::string path = text.substr(0, eq), raw = text.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  std::string pointer;
  std::stringstream parts(path);
  for (std::string part; std::getline(parts, part, '.');) {
    if (part.empty()) throw ConfigError("override '" + text + "': empty path component");
    pointer += "/" + part;
  }
  return {pointer, value};
}

}  // namespace

RunConfig resolve_run_config(const json& document, const std::vector<std::string>& overrides) {
  if (!document.is_object()) throw ConfigError("config: expected a JSON object");
  std::vector<std::pair<std::string, json>> parsed;
  for (const auto& o : overrides) parsed.push_back(parse_override(o));

  std::string preset = document.value("preset", std::string("desk"));
  std::string profile = document.value("profile", std::string("mouse8"));
  bool classes_given = document.contains("model") && document.at("model").contains("num_classes");
  for (const auto& [ptr, value] : parsed) {
    if (ptr == "/preset") preset = value.get<std::string>();
    if (ptr == "/profile") profile = value.get<std::string>();
    if (ptr == "/model/num_classes") classes_given = true;
  }

  json merged = RunConfig::preset_defaults(preset);
  merged.merge_patch(document);
  if (!classes_given) merged["model"]["num_classes"] = RegionProfile::builtin(profile).num_classes() + 1;
  for (const auto& [ptr, value] : parsed) {
    const json::json_pointer p(ptr);
    if (!merged.contains(p.parent_pointer())) throw ConfigError("override: no such section " + ptr);
    merged[p] = value;
  }
  RunConfig c;
  try {
    from_json(merged, c);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  const json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("config " + path.string() + ": not valid JSON");
  json adjusted = doc;
  if (doc.contains("manifest") && doc.at("manifest").is_string()) {
    const fs::path m = doc.at("manifest").get<std::string>();
    if (!m.empty() && m.is_relative()) adjusted["manifest"] = (path.parent_path() / m).lexically_normal().string();
  }
  return resolve_run_config(adjusted, overrides);
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[4] = {'S', 'B', 'R', 'E'};

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
void put_u16(std::string& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) put_u8(out, static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) put_u8(out, static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(std::string bytes, std::string where) : bytes_(std::move(bytes)), where_(std::move(where)) {}

  std::uint32_t u(int width) {
    need(static_cast<std::size_t>(width));
    std::uint32_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw ValidationError(where_ + ": truncated checkpoint");
  }
  std::string bytes_;
  std::string where_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const fs::path& path, const RunConfig& config, const Model<float>& model) {
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  const std::string cfg = json(config).dump();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  const auto& params = model.params().all();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    if (p.name.size() > 0xffff) throw ValidationError("parameter name too long: " + p.name);
    put_u16(out, static_cast<std::uint16_t>(p.name.size()));
    out += p.name;
    const auto& t = p.value.value();
    put_u8(out, static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw RuntimeFailure("cannot write checkpoint " + path.string());
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot read checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string where = path.string();
  Reader r(std::move(bytes), where);
  if (r.text(4) != std::string(kMagic, 4)) throw ValidationError(where + ": not a checkpoint (bad magic)");
  const std::uint32_t version = r.u(4);
  if (version != kCheckpointVersion) {
    throw ValidationError(where + ": unsupported checkpoint version " + std::to_string(version));
  }
  const json cfg_json = json::parse(r.text(r.u(4)), nullptr, false);
  if (cfg_json.is_discarded()) throw ValidationError(where + ": config block is not JSON");
  RunConfig cfg;
  from_json(cfg_json, cfg);
  cfg.model.validate();

  LoadedCheckpoint out{cfg, Model<float>(cfg.model, cfg.seed)};
  auto& params = out.model.params().all();
  const std::uint32_t count = r.u(4);
  if (count != params.size()) {
    throw ValidationError(where + ": " + std::to_string(count) + " tensors, architecture has " +
                          std::to_string(params.size()));
  }
  for (auto& p : params) {
    const std::string name = r.text(r.u(2));
    if (name != p.name) throw ValidationError(where + ": expected tensor " + p.name + ", found " + name);
    const int rank = static_cast<int>(r.u(1));
    nn::Shape shape;
    for (int d = 0; d < rank; ++d) shape.push_back(static_cast<int>(r.u(4)));
    auto& t = p.value.mutable_value();
    if (shape != t.shape()) throw ValidationError(where + ": shape mismatch for " + name);
    for (auto& v : t.values()) v = std::bit_cast<float>(r.u(4));
  }
  if (!r.done()) throw ValidationError(where + ": trailing bytes");
  return out;
}

// ---------------------------------------------------------------- detections

std::vector<std::uint32_t> rle_encode(const Mask& mask) {
  std::vector<std::uint32_t> counts;
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (std::uint8_t b : mask.bits) {
    const std::uint8_t v = b ? 1 : 0;
    if (v != current) {
      counts.push_back(run);
      current = v;
      run = 0;
    }
    ++run;
  }
  counts.push_back(run);
  return counts;
}

Mask rle_decode(const std::vector<std::uint32_t>& counts, int height, int width) {
  Mask m(height, width);
  std::size_t pos = 0;
  std::uint8_t v = 0;
  for (std::uint32_t c : counts) {
    if (pos + c > m.bits.size()) throw ValidationError("rle: runs exceed the mask extent");
    std::fill_n(m.bits.begin() + static_cast<std::ptrdiff_t>(pos), c, v);
    pos += c;
    v ^= 1;
  }
  if (pos != m.bits.size()) throw ValidationError("rle: runs do not cover the mask extent");
  return m;
}

json detections_to_json(const std::string& section, const std::vector<Detection>& detections,
                        const RegionProfile& profile, int height, int width) {
  json list = json::array();
  for (const auto& d : detections) {
    if (d.class_id < 1 || d.class_id > profile.num_classes()) {
      throw ValidationError("detection class " + std::to_string(d.class_id) + " outside profile " + profile.name);
    }
    list.push_back({{"class_id", d.class_id},
                    {"class", profile.classes[static_cast<std::size_t>(d.class_id - 1)]},
                    {"score", d.score},
                    {"box", {d.box.y1, d.box.x1, d.box.y2, d.box.x2}},
                    {"mask", {{"counts", rle_encode(d.mask)}}}});
  }
  return {{"section", section}, {"height", height}, {"width", width}, {"detections", list}};
}

std::vector<Detection> detections_from_json(const json& j) {
  try {
    const int h = j.at("height"), w = j.at("width");
    std::vector<Detection> out;
    for (const auto& e : j.at("detections")) {
      Detection d;
      d.class_id = e.at("class_id");
      d.score = e.at("score");
      const auto b = e.at("box").get<std::vector<double>>();
      if (b.size() != 4) throw ValidationError("detection box needs 4 values");
      d.box = {b[0], b[1], b[2], b[3]};
      d.mask = rle_decode(e.at("mask").at("counts").get<std::vector<std::uint32_t>>(), h, w);
      out.push_back(std::move(d));
    }
    return out;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("detections: ") + e.what());
  }
}

// ---------------------------------------------------------------- overlays

namespace {

// 3x5 glyphs, row-major, top row in the high bits.
constexpr std::array<std::uint16_t, 11> kGlyphs = {
    0b111101101101111, 0b010110010010111, 0b111001111100111, 0b111001111001111,
    0b101101111001001, 0b111100111001111, 0b111100111101111, 0b111001001001001,
    0b111101111101111, 0b111101111001111, 0b000000000000010};

void draw_text(RgbImage& img, int y0, int x0, const std::string& text, Rgb color) {
  for (char ch : text) {
    const int g = ch == '.' ? 10 : ch - '0';
    if (g >= 0 && g <= 10) {
      for (int r = 0; r < 5; ++r) {
        for (int c = 0; c < 3; ++c) {
          if (!(kGlyphs[static_cast<std::size_t>(g)] >> (14 - (r * 3 + c)) & 1)) continue;
          const int y = y0 + r, x = x0 + c;
          if (y >= 0 && y < img.height && x >= 0 && x < img.width) img.set(y, x, color);
        }
      }
    }
    x0 += 4;
  }
}

}  // namespace

RgbImage render_overlay(const RgbImage& image, const std::vector<Detection>& detections,
                        const RegionProfile& profile) {
  RgbImage out = image;
  constexpr double kAlpha = 0.45;
  auto blend = [](std::uint8_t a, std::uint8_t b) {
    return static_cast<std::uint8_t>(std::lround((1.0 - kAlpha) * a + kAlpha * b));
  };
  for (const auto& d : detections) {
    const Rgb color = profile.colors.at(static_cast<std::size_t>(d.class_id - 1));
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width; ++x) {
        if (!d.mask.at(y, x)) continue;
        const Rgb p = out.at(y, x);
        out.set(y, x, {blend(p.r, color.r), blend(p.g, color.g), blend(p.b, color.b)});
      }
    }
  }
  for (const auto& d : detections) {
    const Rgb color = profile.colors.at(static_cast<std::size_t>(d.class_id - 1));
    const Box px = denormalize_box(d.box, out.height, out.width);
    const int y1 = std::clamp(static_cast<int>(std::floor(px.y1)), 0, out.height - 1);
    const int x1 = std::clamp(static_cast<int>(std::floor(px.x1)), 0, out.width - 1);
    const int y2 = std::clamp(static_cast<int>(std::ceil(px.y2)) - 1, y1, out.height - 1);
    const int x2 = std::clamp(static_cast<int>(std::ceil(px.x2)) - 1, x1, out.width - 1);
    for (int x = x1; x <= x2; ++x) {
      out.set(y1, x, color);
      out.set(y2, x, color);
    }
    for (int y = y1; y <= y2; ++y) {
      out.set(y, x1, color);
      out.set(y, x2, color);
    }
    char caption[16];
    std::snprintf(caption, sizeof caption, "%.2f", d.score);
    draw_text(out, y1 >= 6 ? y1 - 6 : y1 + 2, x1 + 1, caption, color);
  }
  return out;
}

void write_class_raster(const fs::path& path, const LabelRaster& raster) {
  RgbImage img(raster.height, raster.width);
  for (std::size_t i = 0; i < raster.codes.size(); ++i) {
    const int c = raster.codes[i];
    if (c < 0 || c > 255) throw ValidationError("class code " + std::to_string(c) + " does not fit 8 bits");
    const auto v = static_cast<std::uint8_t>(c);
    img.pixels[3 * i] = img.pixels[3 * i + 1] = img.pixels[3 * i + 2] = v;
  }
  write_png(path, img);
}

LabelRaster read_class_raster(const fs::path& path) {
  const RgbImage img = read_png(path);
  LabelRaster r(img.height, img.width);
  for (std::size_t i = 0; i < r.codes.size(); ++i) {
    const auto v = img.pixels[3 * i];
    if (img.pixels[3 * i + 1] != v || img.pixels[3 * i + 2] != v) {
      throw ValidationError(path.string() + ": class raster pixels must be gray");
    }
    r.codes[i] = v;
  }
  return r;
}

// ---------------------------------------------------------------- prepare

RotationSweep parse_rotation_sweep(const std::string& text) {
  RotationSweep s;
  char tail = 0;
  if (std::sscanf(text.c_str(), "%d:%d:%d%c", &s.min_deg, &s.max_deg, &s.step_deg, &tail) != 3) {
    throw ValidationError("rotations: expected lo:hi:step, got '" + text + "'");
  }
  if (s.step_deg <= 0 || s.min_deg > s.max_deg || (s.max_deg - s.min_deg) % s.step_deg != 0) {
    throw ValidationError("rotations: step must be positive and divide the range in '" + text + "'");
  }
  return s;
}

namespace {

std::string record_stem(const SectionRecord& r, bool rotated) {
  std::string s = r.source_id;
  if (rotated) s += "_rot" + std::to_string(r.rotation_deg);
  if (r.flipped) s += "_flip";
  return s;
}

struct SourcePair {
  std::string id;
  fs::path image;
  fs::path label;
};

std::vector<SourcePair> scan_input_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ValidationError("input directory not found: " + dir.string());
  std::map<std::string, SourcePair> pairs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".png") continue;
    const std::string stem = e.path().stem().string();
    if (stem.size() <= 4) continue;
    const std::string suffix = stem.substr(stem.size() - 4), id = stem.substr(0, stem.size() - 4);
    if (suffix == "_img") pairs[id].image = e.path();
    if (suffix == "_lbl") pairs[id].label = e.path();
  }
  std::vector<SourcePair> out;
  std::vector<std::string> unpaired;
  for (auto& [id, p] : pairs) {
    if (p.image.empty() || p.label.empty()) {
      unpaired.push_back(id);
      continue;
    }
    p.id = id;
    out.push_back(p);
  }
  if (!unpaired.empty()) {
    std::string msg = "unpaired inputs (need <stem>_img.png and <stem>_lbl.png):";
    for (const auto& id : unpaired) msg += " " + id;
    throw ValidationError(msg);
  }
  return out;
}

}  // namespace

PrepareSummary cmd_prepare(const PrepareOptions& o) {
  const RegionProfile profile = RegionProfile::builtin(o.profile);
  if (o.out_dir.empty()) throw ValidationError("prepare: --out is required");
  if (!(o.factor > 0.0 && o.factor <= 1.0)) throw ValidationError("prepare: factor must be in (0,1]");
  if (o.phantoms < 0) throw ValidationError("prepare: phantom count must be >= 0");
  if ((o.phantoms > 0) == !o.input_dir.empty()) {
    throw ValidationError("prepare: give exactly one of --phantoms or --in");
  }

  std::vector<SourcePair> inputs;
  std::size_t n_sources = static_cast<std::size_t>(o.phantoms);
  if (o.phantoms == 0) {
    inputs = scan_input_dir(o.input_dir);
    n_sources = inputs.size();
  }
  if (n_sources < 2) throw ValidationError("prepare: need at least 2 sources");

  // Per-source work is independent; results are gathered in source order.
  std::vector<std::vector<SectionRecord>> per_source(n_sources);
  std::vector<std::vector<std::string>> per_source_warnings(n_sources);
  std::vector<std::string> errors(n_sources);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t s = 0; s < n_sources; ++s) {
    char digits[16];
    try {
      SectionRecord base;
      if (o.phantoms > 0) {
        std::snprintf(digits, sizeof digits, "%04zu", s);
        const PhantomPair p = generate_phantom(profile, o.seed * 1000003ull + s, o.phantom_size, o.phantom_size);
        base = make_record(p.image, p.label, profile, std::string("phantom_") + digits);
      } else {
        base = make_record(read_png(inputs[s].image), read_png(inputs[s].label), profile, inputs[s].id,
                           o.unknown_tolerance);
      }
      std::vector<SectionRecord> variants;
      if (o.use_rotations) {
        variants = augment_rotations(base, o.rotations.min_deg, o.rotations.max_deg, o.rotations.step_deg, o.flip,
                                     o.include_zero);
      } else {
        variants.push_back(base);
        if (o.flip) variants.push_back(flip_record(base));
      }
      for (auto& v : variants) {
        if (o.factor != 1.0) v = downsample(v, o.factor, &per_source_warnings[s]);
        if (v.masks.empty()) {
          per_source_warnings[s].push_back("record " + record_stem(v, o.use_rotations) + ": no regions, dropped");
          continue;
        }
        per_source[s].push_back(std::move(v));
      }
    } catch (const std::exception& e) {
      errors[s] = e.what();
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw ValidationError(e);
  }

  PrepareSummary summary;
  summary.sources = n_sources;
  std::vector<SectionRecord> records;
  for (std::size_t s = 0; s < n_sources; ++s) {
    for (auto& r : per_source[s]) records.push_back(std::move(r));
    for (auto& w : per_source_warnings[s]) summary.warnings.push_back(std::move(w));
  }
  std::vector<std::string> problems;
  for (const auto& r : records) {
    for (auto& p : validate_record(r)) problems.push_back(std::move(p));
  }

  DatasetManifest manifest = split_dataset(records, o.train_fraction, o.seed);
  manifest.profile = profile.name;
  manifest.downsample_factor = o.factor;

  fs::create_directories(o.out_dir / "images");
  fs::create_directories(o.out_dir / "labels");
  for (std::size_t i = 0; i < records.size(); ++i) {
    const SectionRecord& r = records[i];
    const std::string stem = record_stem(r, o.use_rotations);
    auto& e = manifest.records[i];
    e.image_path = "images/" + stem + "_img.png";
    e.label_path = "labels/" + stem + "_lbl.png";
    write_png(o.out_dir / e.image_path, r.image);
    write_png(o.out_dir / e.label_path, render_label(r.masks, r.class_ids, profile, r.image.height, r.image.width));
    (r.split == Split::kTrain ? summary.train_records : summary.test_records) += 1;
  }
  summary.records = records.size();

  std::ofstream(o.out_dir / "manifest.json") << json(manifest).dump(2) << "\n";
  const json report{{"sources", summary.sources},
                    {"records", summary.records},
                    {"train_records", summary.train_records},
                    {"test_records", summary.test_records},
                    {"warnings", summary.warnings},
                    {"invalid_records", problems}};
  std::ofstream(o.out_dir / "report.json") << report.dump(2) << "\n";
  if (!problems.empty()) throw ValidationError("prepare: " + problems.front());
  return summary;
}

std::string section_id_for(const fs::path& image_path) {
  std::string stem = image_path.stem().string();
  if (stem.size() > 4 && stem.compare(stem.size() - 4, 4, "_img") == 0) stem.resize(stem.size() - 4);
  return stem;
}

std::vector<LoadedSection> load_manifest_sections(const fs::path& manifest_path, const std::string& split) {
  if (split != "train" && split != "test" && split != "all") {
    throw ValidationError("split must be train, test or all, got '" + split + "'");
  }
  std::ifstream in(manifest_path);
  if (!in) throw ValidationError("cannot read manifest " + manifest_path.string());
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ValidationError("manifest " + manifest_path.string() + ": not valid JSON");
  DatasetManifest m;
  try {
    from_json(j, m);
  } catch (const json::exception& e) {
    throw ValidationError("manifest " + manifest_path.string() + ": " + e.what());
  }
  const RegionProfile profile = RegionProfile::builtin(m.profile);
  const fs::path root = manifest_path.parent_path();
  std::vector<LoadedSection> out;
  for (const auto& e : m.records) {
    if (split == "train" && e.split != Split::kTrain) continue;
    if (split == "test" && e.split != Split::kTest) continue;
    LoadedSection s;
    s.id = section_id_for(e.image_path);
    s.record = make_record(read_png(root / e.image_path), read_png(root / e.label_path), profile, e.source_id);
    s.record.rotation_deg = e.rotation_deg;
    s.record.flipped = e.flipped;
    s.record.split = e.split;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------- train

std::vector<StepRecord> cmd_train(const TrainOptions& o) {
  if (o.config_path.empty()) throw ConfigError("train: --config is required");
  if (o.out_dir.empty()) throw ValidationError("train: --out is required");
  RunConfig cfg = load_run_config(o.config_path, o.overrides);
  if (o.has_seed) cfg.seed = o.seed;
  if (cfg.manifest.empty()) throw ConfigError("train: config names no manifest");

  std::vector<LoadedSection> sections = load_manifest_sections(cfg.manifest, "train");
  if (sections.empty()) throw ValidationError("train: manifest has no training records");
  for (const auto& s : sections) {
    if (s.record.masks.empty()) throw ValidationError("train: record " + s.id + " has no regions");
  }
  fs::create_directories(o.out_dir);
  std::ofstream(o.out_dir / "config.json") << json(cfg).dump(2) << "\n";

  const int stride = cfg.model.backbone.top_stride();
  std::vector<TrainingExample> upright;
  for (const auto& s : sections) upright.push_back(to_training_example(s.record, stride));
  const int jitter = cfg.rotation_jitter_deg;
  ExampleSource source = [&](int, std::mt19937_64& rng) {
    const std::size_t i = rng() % sections.size();
    if (jitter == 0) return upright[i];
    const int deg = static_cast<int>(rng() % static_cast<std::uint64_t>(2 * jitter + 1)) - jitter;
    if (deg == 0) return upright[i];
    const SectionRecord rotated = rotate_record(sections[i].record, deg);
    return rotated.masks.empty() ? upright[i] : to_training_example(rotated, stride);
  };

  Model<float> model(cfg.model, cfg.seed);
  std::ofstream csv(o.out_dir / "loss.csv");
  csv << "step,stage,learning_rate,rpn_cls,rpn_reg,cls,reg,mask,total,grad_norm\n";
  auto on_step = [&](const StepRecord& r, Model<float>& m) {
    char line[256];
    std::snprintf(line, sizeof line, "%d,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.stage,
                  r.learning_rate, r.loss.rpn_cls, r.loss.rpn_reg, r.loss.cls, r.loss.reg, r.loss.mask,
                  r.loss.total, r.grad_norm);
    csv << line << std::flush;
    if (cfg.checkpoint_every > 0 && (r.step + 1) % cfg.checkpoint_every == 0) {
      char name[40];
      std::snprintf(name, sizeof name, "checkpoint_%06d.sbre", r.step + 1);
      save_checkpoint(o.out_dir / name, cfg, m);
    }
  };
  try {
    auto trace = train_two_stage<float>(model, source, cfg.schedule, cfg.loss, cfg.seed, on_step);
    save_checkpoint(o.out_dir / "model.sbre", cfg, model);
    return trace;
  } catch (const TrainingDiverged&) {
    save_checkpoint(o.out_dir / "last_good.sbre", cfg, model);
    throw;
  }
}

// ---------------------------------------------------------------- infer

InferSummary cmd_infer(const InferOptions& o) {
  if (o.out_dir.empty()) throw ValidationError("infer: --out is required");
  if (o.images.empty() == o.manifest.empty()) throw ValidationError("infer: give either images or --manifest");
  const LoadedCheckpoint ckpt = load_checkpoint(o.checkpoint);
  const RegionProfile profile = RegionProfile::builtin(ckpt.config.profile);
  fs::create_directories(o.out_dir);

  struct Job {
    std::string id;
    fs::path path;
  };
  std::vector<Job> jobs;
  if (!o.manifest.empty()) {
    std::ifstream in(o.manifest);
    if (!in) throw ValidationError("cannot read manifest " + o.manifest.string());
    const json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ValidationError("manifest " + o.manifest.string() + ": not valid JSON");
    DatasetManifest m = j;
    for (const auto& e : m.records) {
      const bool keep = o.split == "all" || (o.split == "train") == (e.split == Split::kTrain);
      if (keep) jobs.push_back({section_id_for(e.image_path), o.manifest.parent_path() / e.image_path});
    }
  } else {
    for (const auto& p : o.images) jobs.push_back({section_id_for(p), p});
  }

  InferSummary summary;
  for (const auto& job : jobs) {
    RgbImage image;
    try {
      image = read_png(job.path);
    } catch (const std::exception& e) {
      summary.skipped.push_back(job.path.string() + ": " + e.what());
      continue;
    }
    const auto dets = ckpt.model.detect(to_tensor(image));
    std::ofstream(o.out_dir / (job.id + "_det.json"))
        << detections_to_json(job.id, dets, profile, image.height, image.width).dump() << "\n";
    write_png(o.out_dir / (job.id + "_overlay.png"), render_overlay(image, dets, profile));
    write_class_raster(o.out_dir / (job.id + "_pred.png"), detections_to_raster(dets, image.height, image.width));
    ++summary.processed;
  }
  if (summary.processed == 0 && !jobs.empty()) throw RuntimeFailure("infer: no image could be read");
  return summary;
}

// ---------------------------------------------------------------- evaluate

namespace {

std::vector<Detection> detections_from_instances(const std::vector<Mask>& masks, const std::vector<int>& classes) {
  std::vector<Detection> out;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    Detection d;
    d.class_id = classes[i];
    d.score = 1.0;
    d.box = normalize_box(masks[i].bounding_box(), masks[i].height, masks[i].width);
    d.mask = masks[i];
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<Detection> detections_from_raster(const LabelRaster& r) {
  std::map<int, Mask> by_class;
  for (std::size_t i = 0; i < r.codes.size(); ++i) {
    if (r.codes[i] == 0) continue;
    auto [it, fresh] = by_class.try_emplace(r.codes[i], r.height, r.width);
    it->second.bits[i] = 1;
  }
  std::vector<Mask> masks;
  std::vector<int> classes;
  for (auto& [c, m] : by_class) {
    classes.push_back(c);
    masks.push_back(std::move(m));
  }
  return detections_from_instances(masks, classes);
}

/// id -> prediction file; a detections file wins over rasters.
std::map<std::string, fs::path> scan_predictions(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ValidationError("prediction directory not found: " + dir.string());
  static const std::array<std::string, 3> kSuffixes{"_det.json", "_pred.png", "_lbl.png"};
  std::map<std::string, fs::path> found;
  std::map<std::string, std::size_t> rank;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    for (std::size_t k = 0; k < kSuffixes.size(); ++k) {
      const auto& s = kSuffixes[k];
      if (name.size() <= s.size() || name.compare(name.size() - s.size(), s.size(), s) != 0) continue;
      const std::string id = name.substr(0, name.size() - s.size());
      if (!rank.count(id) || k < rank[id]) {
        rank[id] = k;
        found[id] = e.path();
      }
    }
  }
  return found;
}

std::vector<Detection> load_prediction(const fs::path& path, const RegionProfile& profile) {
  const std::string name = path.filename().string();
  if (name.ends_with("_det.json")) {
    std::ifstream in(path);
    const json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ValidationError(path.string() + ": not valid JSON");
    return detections_from_json(j);
  }
  if (name.ends_with("_pred.png")) return detections_from_raster(read_class_raster(path));
  const InstanceMasks inst = extract_instance_masks(read_png(path), profile);
  return detections_from_instances(inst.masks, inst.class_ids);
}

}  // namespace

json eval_result_to_json(const EvalResult& r, const RegionProfile& profile) {
  json per_class = json::object();
  for (const auto& [c, s] : r.per_class) {
    const std::string name = c >= 1 && c <= profile.num_classes() ? profile.classes[static_cast<std::size_t>(c - 1)]
                                                                  : std::to_string(c);
    per_class[name] = {{"class_id", c},         {"ap", s.ap},
                       {"dice", s.dice},        {"hausdorff", s.hausdorff},
                       {"cmd", s.cmd},          {"instances", s.instances},
                       {"empty_predictions", s.empty_predictions}};
  }
  return {{"mean_ap", r.mean_ap}, {"per_class", per_class}, {"per_section_mse", r.per_section_mse}};
}

std::vector<NamedResult> cmd_evaluate(const EvaluateOptions& o) {
  if (o.out_dir.empty()) throw ValidationError("evaluate: --out is required");
  std::ifstream in(o.manifest);
  if (!in) throw ValidationError("cannot read manifest " + o.manifest.string());
  const json mj = json::parse(in, nullptr, false);
  if (mj.is_discarded()) throw ValidationError("manifest " + o.manifest.string() + ": not valid JSON");
  const RegionProfile profile = RegionProfile::builtin(mj.at("profile").get<std::string>());

  const std::vector<LoadedSection> sections = load_manifest_sections(o.manifest, o.split);
  if (sections.empty()) throw ValidationError("evaluate: manifest has no " + o.split + " records");
  std::vector<std::string> ids;
  std::vector<std::vector<Instance>> gt;
  for (const auto& s : sections) {
    ids.push_back(s.id);
    std::vector<Instance> g;
    for (std::size_t i = 0; i < s.record.masks.size(); ++i) g.push_back({s.record.class_ids[i], s.record.masks[i]});
    gt.push_back(std::move(g));
  }

  std::vector<std::pair<std::string, fs::path>> methods{{o.name, o.predictions}};
  for (const auto& c : o.compare) methods.push_back(c);
  std::set<std::string> names;
  for (const auto& [name, dir] : methods) {
    if (name.empty() || !names.insert(name).second) throw ValidationError("evaluate: method names must be unique");
  }

  std::vector<NamedResult> results;
  const std::set<std::string> wanted(ids.begin(), ids.end());
  for (const auto& [name, dir] : methods) {
    const auto found = scan_predictions(dir);
    std::string missing, extra;
    for (const auto& id : ids) {
      if (!found.count(id)) missing += " " + id;
    }
    for (const auto& [id, path] : found) {
      if (!wanted.count(id)) extra += " " + id;
    }
    if (!missing.empty()) throw ValidationError("evaluate: " + name + " lacks predictions for:" + missing);
    if (!extra.empty()) {
      throw ValidationError("evaluate: " + name + " has predictions outside the " + o.split + " split:" + extra);
    }
    std::vector<std::vector<Detection>> dets;
    for (const auto& id : ids) dets.push_back(load_prediction(found.at(id), profile));
    results.push_back({name, evaluate(ids, dets, gt, o.iou_threshold, o.averaging)});
  }

  fs::create_directories(o.out_dir);
  json out = json::object();
  out["iou_threshold"] = o.iou_threshold;
  out["averaging"] = o.averaging == ApAveraging::kClassMean ? "class" : "section";
  out["methods"] = json::array();
  for (const auto& r : results) {
    json m = eval_result_to_json(r.result, profile);
    m["name"] = r.name;
    out["methods"].push_back(m);
  }
  std::ofstream(o.out_dir / "eval.json") << out.dump(2) << "\n";
  comparison_report(results, profile.classes, o.out_dir);
  return results;
}

void apply_thread_limit() {
  const char* v = std::getenv("SEBRE_THREADS");
  if (!v || !*v) return;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError(std::string("SEBRE_THREADS must be a positive integer, got '") + v + "'");
  omp_set_num_threads(static_cast<int>(std::min<long>(n, omp_get_max_threads())));
}

}  // namespace brainseg
