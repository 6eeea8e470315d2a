#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "brainseg/cli.hpp"
#include "brainseg/errors.hpp"
#include "oracles.hpp"

using namespace brainseg;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("brainseg_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Small enough for a few training steps in a unit test.
const std::vector<std::string> kSmallModel = {
    "model.backbone.stage_blocks=[1,1,1,1]", "model.backbone.channels=[4,4,8,8]", "model.backbone.stem_channels=4",
    "model.backbone.fpn_channels=8",         "model.head_fc_dim=16",              "model.mask_channels=8"};

RunConfig small_config() { return resolve_run_config(json::object(), kSmallModel); }

int run_tool(const std::string& args) {
  const int status = std::system((std::string(BRAINSEG_TOOL) + " " + args + " >/dev/null 2>&1").c_str());
  return WEXITSTATUS(status);
}

}  // namespace

TEST(RunConfig, PresetsAndOverrides) {
  const RunConfig desk = resolve_run_config(json::object());
  EXPECT_EQ(desk.schedule.stages.size(), 2u);
  EXPECT_EQ(desk.schedule.stages[0].iterations, 600);
  EXPECT_EQ(desk.schedule.stages[1].learning_rate, 1e-4);
  EXPECT_EQ(desk.model.num_classes, 9);

  const RunConfig paper = resolve_run_config(json{{"preset", "paper"}});
  EXPECT_EQ(paper.schedule.stages[0].iterations, 6000);
  EXPECT_EQ(paper.schedule.stages[1].iterations, 9000);
  EXPECT_EQ(paper.schedule.momentum, 0.9);

  const RunConfig hippo = resolve_run_config(json{{"profile", "hippo4"}});
  EXPECT_EQ(hippo.model.num_classes, 5);

  const RunConfig o = resolve_run_config(json{{"seed", 4}}, {"model.detection_threshold=0.5", "seed=9",
                                                              "schedule.stages.1.iterations=3", "preset=paper"});
  EXPECT_EQ(o.model.detection_threshold, 0.5);
  EXPECT_EQ(o.seed, 9u);
  EXPECT_EQ(o.schedule.stages[1].iterations, 3);
  EXPECT_EQ(o.schedule.stages[0].iterations, 6000);

  EXPECT_THROW(resolve_run_config(json{{"colour", 1}}), ConfigError);
  EXPECT_THROW(resolve_run_config(json::object(), {"model.nonsense=1"}), ConfigError);
  EXPECT_THROW(resolve_run_config(json::object(), {"model.num_classes=4"}), ConfigError);
  EXPECT_THROW(resolve_run_config(json{{"preset", "huge"}}), ConfigError);
  EXPECT_THROW(resolve_run_config(json{{"manifest", "/no/such/manifest.json"}}), ConfigError);
  EXPECT_THROW(resolve_run_config(json::object(), {"seed"}), ConfigError);
}

TEST(RunConfig, JsonRoundTrip) {
  const RunConfig a = small_config();
  RunConfig b;
  from_json(json(a), b);
  EXPECT_EQ(json(a).dump(), json(b).dump());
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const fs::path dir = scratch("ckpt");
  const RunConfig cfg = small_config();
  Model<float> model(cfg.model, 17);
  save_checkpoint(dir / "a.sbre", cfg, model);
  const LoadedCheckpoint loaded = load_checkpoint(dir / "a.sbre");
  save_checkpoint(dir / "b.sbre", loaded.config, loaded.model);
  const std::string a = slurp(dir / "a.sbre");
  EXPECT_EQ(a, slurp(dir / "b.sbre"));
  EXPECT_EQ(a.substr(0, 4), "SBRE");
  EXPECT_EQ(a[4], 1);
  for (std::size_t i = 0; i < model.params().all().size(); ++i) {
    EXPECT_EQ(model.params().all()[i].value.value(), loaded.model.params().all()[i].value.value());
  }

  // Layout spot check: the first tensor header follows the config block.
  const std::uint32_t cfg_len = static_cast<std::uint8_t>(a[8]) | static_cast<std::uint8_t>(a[9]) << 8 |
                                static_cast<std::uint8_t>(a[10]) << 16 | static_cast<std::uint8_t>(a[11]) << 24;
  EXPECT_EQ(json::parse(a.substr(12, cfg_len)), json(cfg));
  const std::size_t first = 12 + cfg_len + 4;
  const std::string& name0 = model.params().all()[0].name;
  EXPECT_EQ(static_cast<std::size_t>(static_cast<std::uint8_t>(a[first])), name0.size());
  EXPECT_EQ(a.substr(first + 2, name0.size()), name0);
}

TEST(Checkpoint, RejectsDamage) {
  const fs::path dir = scratch("ckpt_bad");
  const RunConfig cfg = small_config();
  save_checkpoint(dir / "ok.sbre", cfg, Model<float>(cfg.model, 1));
  const std::string ok = slurp(dir / "ok.sbre");

  auto write = [&](const std::string& name, const std::string& bytes) {
    std::ofstream(dir / name, std::ios::binary) << bytes;
    return dir / name;
  };
  EXPECT_THROW(load_checkpoint(write("magic.sbre", "XBRE" + ok.substr(4))), ValidationError);
  EXPECT_THROW(load_checkpoint(write("short.sbre", ok.substr(0, ok.size() - 3))), ValidationError);
  EXPECT_THROW(load_checkpoint(write("long.sbre", ok + "x")), ValidationError);

  // Same tensors under a config describing a different architecture.
  RunConfig wider = cfg;
  wider.model.head_fc_dim = 20;
  std::string swapped(ok.substr(0, 8));
  const std::string wj = json(wider).dump();
  const std::uint32_t old_len = static_cast<std::uint8_t>(ok[8]) | static_cast<std::uint8_t>(ok[9]) << 8 |
                                static_cast<std::uint8_t>(ok[10]) << 16 | static_cast<std::uint8_t>(ok[11]) << 24;
  for (int i = 0; i < 4; ++i) swapped.push_back(static_cast<char>(wj.size() >> (8 * i)));
  swapped += wj + ok.substr(12 + old_len);
  EXPECT_THROW(load_checkpoint(write("arch.sbre", swapped)), ValidationError);
  EXPECT_THROW(load_checkpoint(dir / "missing.sbre"), RuntimeFailure);
}

TEST(Rle, RoundTripsAndStartsWithUnset) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 200; ++t) {
    const Mask m = oracle::random_mask(rng, 1 + static_cast<int>(rng() % 20), 1 + static_cast<int>(rng() % 20), true);
    const auto counts = rle_encode(m);
    std::size_t total = 0;
    for (auto c : counts) total += c;
    EXPECT_EQ(total, m.bits.size());
    EXPECT_EQ(rle_decode(counts, m.height, m.width), m);
  }
  Mask full(2, 3);
  std::fill(full.bits.begin(), full.bits.end(), 1);
  EXPECT_EQ(rle_encode(full), (std::vector<std::uint32_t>{0, 6}));
  EXPECT_EQ(rle_encode(Mask(2, 3)), (std::vector<std::uint32_t>{6}));
  EXPECT_THROW(rle_decode({3, 4}, 2, 3), ValidationError);
  EXPECT_THROW(rle_decode({3, 2}, 2, 3), ValidationError);
}

TEST(Detections, JsonRoundTrip) {
  const auto profile = RegionProfile::builtin("mouse8");
  std::mt19937_64 rng(2);
  std::vector<Detection> dets;
  for (int c = 1; c <= 3; ++c) {
    Detection d;
    d.class_id = c;
    d.score = 0.9 + 0.01 * c;
    d.mask = oracle::random_mask(rng, 12, 9, false);
    d.box = normalize_box(d.mask.bounding_box(), 12, 9);
    dets.push_back(d);
  }
  const json j = detections_to_json("s1", dets, profile, 12, 9);
  EXPECT_EQ(j.at("detections")[1].at("class"), "hippocampus");
  const auto back = detections_from_json(json::parse(j.dump()));
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].class_id, dets[i].class_id);
    EXPECT_EQ(back[i].score, dets[i].score);
    EXPECT_EQ(back[i].mask, dets[i].mask);
    EXPECT_EQ(back[i].box.x2, dets[i].box.x2);
  }
  dets[0].class_id = 9;
  EXPECT_THROW(detections_to_json("s1", dets, profile, 12, 9), ValidationError);
}

TEST(Overlay, ColorsAndUntouchedImage) {
  const auto profile = RegionProfile::builtin("mouse8");
  RgbImage img(40, 50, {100, 100, 100});
  EXPECT_EQ(render_overlay(img, {}, profile), img);

  Detection d;
  d.class_id = 4;
  d.score = 0.97;
  d.mask = Mask(40, 50);
  for (int y = 10; y < 30; ++y) {
    for (int x = 12; x < 40; ++x) d.mask.at(y, x) = 1;
  }
  d.box = normalize_box(d.mask.bounding_box(), 40, 50);
  const RgbImage out = render_overlay(img, {d}, profile);
  const Rgb c = profile.colors[3];
  EXPECT_EQ(out.at(10, 20), c);  // box outline
  EXPECT_EQ(out.at(29, 39), c);
  const Rgb inside = out.at(20, 20);
  EXPECT_NE(inside, img.at(20, 20));
  EXPECT_EQ(out.at(2, 2), img.at(2, 2));
  // The caption sits above the box.
  int caption = 0;
  for (int y = 4; y < 9; ++y) {
    for (int x = 13; x < 30; ++x) caption += out.at(y, x) == c;
  }
  EXPECT_GT(caption, 10);
}

TEST(ClassRaster, PngRoundTrip) {
  const fs::path dir = scratch("raster");
  LabelRaster r(7, 11);
  for (std::size_t i = 0; i < r.codes.size(); ++i) r.codes[i] = static_cast<int>(i % 9);
  write_class_raster(dir / "r.png", r);
  EXPECT_EQ(read_class_raster(dir / "r.png"), r);
}

TEST(Prepare, PhantomManifestIsDeterministic) {
  const fs::path a = scratch("prep_a"), b = scratch("prep_b");
  PrepareOptions o;
  o.phantoms = 6;
  o.phantom_size = 128;
  o.seed = 7;
  o.out_dir = a;
  const auto s = cmd_prepare(o);
  EXPECT_EQ(s.sources, 6u);
  EXPECT_EQ(s.records, 6u);
  EXPECT_EQ(s.train_records, 4u);
  o.out_dir = b;
  cmd_prepare(o);
  EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));
  EXPECT_EQ(slurp(a / "images/phantom_0003_img.png"), slurp(b / "images/phantom_0003_img.png"));

  const auto sections = load_manifest_sections(a / "manifest.json", "all");
  ASSERT_EQ(sections.size(), 6u);
  for (const auto& sec : sections) EXPECT_EQ(sec.record.masks.size(), 8u);
  EXPECT_EQ(load_manifest_sections(a / "manifest.json", "test").size(), 2u);
}

TEST(Prepare, RotationSweepFromDirectory) {
  const fs::path in = scratch("prep_in"), out = scratch("prep_rot");
  const auto profile = RegionProfile::builtin("mouse8");
  for (int i = 0; i < 30; ++i) {
    const auto p = generate_phantom(profile, 50 + i, 128, 128);
    write_png(in / ("s" + std::to_string(i) + "_img.png"), p.image);
    write_png(in / ("s" + std::to_string(i) + "_lbl.png"), p.label);
  }
  PrepareOptions o;
  o.input_dir = in;
  o.use_rotations = true;
  o.rotations = parse_rotation_sweep("-20:20:2");
  o.out_dir = out;
  const auto s = cmd_prepare(o);
  EXPECT_EQ(s.sources, 30u);
  EXPECT_EQ(s.records, 600u);
  EXPECT_EQ(s.train_records, 400u);
  EXPECT_EQ(s.test_records, 200u);
  const json m = json::parse(slurp(out / "manifest.json"));
  std::set<std::string> train_ids, test_ids;
  for (const auto& r : m.at("records")) {
    EXPECT_NE(r.at("rotation_deg"), 0);
    (r.at("split") == "train" ? train_ids : test_ids).insert(r.at("source_id").get<std::string>());
  }
  for (const auto& id : train_ids) EXPECT_FALSE(test_ids.count(id)) << id;

  EXPECT_THROW(parse_rotation_sweep("-20:20:3"), ValidationError);
  EXPECT_THROW(parse_rotation_sweep("-20:20"), ValidationError);
  std::ofstream(in / "lonely_img.png") << "x";
  o.out_dir = scratch("prep_bad");
  EXPECT_THROW(cmd_prepare(o), ValidationError);
}

TEST(Evaluate, GroundTruthAsPredictionsIsPerfect) {
  const fs::path ds = scratch("eval_ds"), gt = scratch("eval_gt"), shifted = scratch("eval_shift");
  PrepareOptions o;
  o.phantoms = 6;
  o.phantom_size = 128;
  o.out_dir = ds;
  cmd_prepare(o);
  const auto profile = RegionProfile::builtin("mouse8");
  for (const auto& s : load_manifest_sections(ds / "manifest.json", "test")) {
    fs::copy_file(ds / "labels" / (s.id + "_lbl.png"), gt / (s.id + "_lbl.png"));
    // A second method: the ground truth moved right by 3 pixels, as a class raster.
    std::vector<Instance> inst;
    for (std::size_t i = 0; i < s.record.masks.size(); ++i) inst.push_back({s.record.class_ids[i], s.record.masks[i]});
    const LabelRaster r = instances_to_raster(inst, 128, 128);
    LabelRaster moved(128, 128);
    for (int y = 0; y < 128; ++y) {
      for (int x = 3; x < 128; ++x) moved.codes[y * 128 + x] = r.codes[y * 128 + x - 3];
    }
    write_class_raster(shifted / (s.id + "_pred.png"), moved);
  }

  EvaluateOptions e;
  e.manifest = ds / "manifest.json";
  e.predictions = gt;
  e.name = "truth";
  e.compare = {{"shifted", shifted}, {"again", gt}};
  e.out_dir = scratch("eval_out");
  const auto results = cmd_evaluate(e);
  ASSERT_EQ(results.size(), 3u);
  EXPECT_EQ(results[0].result.mean_ap, 1.0);
  for (const auto& [c, s] : results[0].result.per_class) EXPECT_EQ(s.dice, 1.0);
  for (const auto& [id, mse] : results[0].result.per_section_mse) EXPECT_EQ(mse, 0.0);
  EXPECT_LT(results[1].result.per_class.at(1).dice, 1.0);

  const std::string corr = slurp(e.out_dir / "correlation.csv");
  EXPECT_EQ(std::count(corr.begin(), corr.end(), '\n'), 4);
  EXPECT_EQ(corr.substr(0, corr.find('\n')), "method,truth,shifted,again");
  const json ej = json::parse(slurp(e.out_dir / "eval.json"));
  EXPECT_EQ(ej.at("methods")[0].at("mean_ap"), 1.0);

  const std::string table = slurp(e.out_dir / "table.csv");
  const auto again = cmd_evaluate(e);
  EXPECT_EQ(slurp(e.out_dir / "table.csv"), table);

  // Coverage errors name the sections.
  const auto first = load_manifest_sections(ds / "manifest.json", "test").front().id;
  fs::remove(gt / (first + "_lbl.png"));
  e.compare.clear();
  try {
    cmd_evaluate(e);
    FAIL();
  } catch (const ValidationError& err) {
    EXPECT_NE(std::string(err.what()).find(first), std::string::npos);
  }
  e.split = "all";
  EXPECT_THROW(cmd_evaluate(e), ValidationError);
}

TEST(Infer, ThresholdContractAndOutputs) {
  const fs::path ds = scratch("infer_ds"), out = scratch("infer_out");
  PrepareOptions o;
  o.phantoms = 3;
  o.phantom_size = 128;
  o.out_dir = ds;
  cmd_prepare(o);
  const RunConfig cfg = small_config();
  save_checkpoint(ds / "m.sbre", cfg, Model<float>(cfg.model, 3));

  InferOptions i;
  i.checkpoint = ds / "m.sbre";
  i.manifest = ds / "manifest.json";
  i.split = "all";
  i.out_dir = out;
  const auto s = cmd_infer(i);
  EXPECT_EQ(s.processed, 3u);
  // An untrained model scores nothing at 0.9.
  const auto id = section_id_for("phantom_0000_img.png");
  const json j = json::parse(slurp(out / (id + "_det.json")));
  EXPECT_TRUE(j.at("detections").empty());
  EXPECT_EQ(read_png(out / (id + "_overlay.png")), read_png(ds / "images" / (id + "_img.png")));
  const LabelRaster pred = read_class_raster(out / (id + "_pred.png"));
  EXPECT_TRUE(std::all_of(pred.codes.begin(), pred.codes.end(), [](int c) { return c == 0; }));

  InferOptions bad;
  bad.checkpoint = ds / "m.sbre";
  bad.images = {ds / "nothing.png"};
  bad.out_dir = out;
  EXPECT_THROW(cmd_infer(bad), RuntimeFailure);
}

TEST(Train, DeterministicCheckpointsAndTrace) {
  const fs::path ds = scratch("train_ds");
  PrepareOptions o;
  o.phantoms = 4;
  o.phantom_size = 128;
  o.out_dir = ds;
  cmd_prepare(o);
  json doc{{"manifest", "manifest.json"}, {"checkpoint_every", 2}, {"rotation_jitter_deg", 10}};
  doc["schedule"] = {{"stages",
                      {{{"name", "heads"}, {"heads_only", true}, {"iterations", 2}, {"learning_rate", 1e-3}},
                       {{"name", "all"}, {"heads_only", false}, {"iterations", 1}, {"learning_rate", 1e-4}}}}};
  std::ofstream(ds / "run.json") << doc.dump();

  TrainOptions t;
  t.config_path = ds / "run.json";
  t.overrides = kSmallModel;
  const fs::path first = scratch("train_a");
  t.out_dir = first;
  const auto trace = cmd_train(t);
  ASSERT_EQ(trace.size(), 3u);
  t.out_dir = scratch("train_b");
  cmd_train(t);
  for (const char* f : {"model.sbre", "checkpoint_000002.sbre", "loss.csv", "config.json"}) {
    EXPECT_EQ(slurp(first / f), slurp(t.out_dir / f)) << f;
  }
  EXPECT_FALSE(fs::exists(t.out_dir / "checkpoint_000003.sbre"));
  const std::string csv = slurp(t.out_dir / "loss.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);

  t.has_seed = true;
  t.seed = 99;
  t.out_dir = scratch("train_c");
  cmd_train(t);
  EXPECT_NE(slurp(t.out_dir / "model.sbre"), slurp(first / "model.sbre"));

  // Divergence keeps the last good weights.
  t.overrides.push_back("schedule.stages.0.learning_rate=1e30");
  t.overrides.push_back("schedule.stages.0.iterations=20");
  t.out_dir = scratch("train_d");
  EXPECT_THROW(cmd_train(t), TrainingDiverged);
  EXPECT_NO_THROW(load_checkpoint(t.out_dir / "last_good.sbre"));
}

TEST(Tool, ExitCodes) {
  const fs::path dir = scratch("tool");
  EXPECT_EQ(run_tool("--help"), 0);
  EXPECT_EQ(run_tool(""), 1);
  EXPECT_EQ(run_tool("prepare --phantoms 1 --out " + dir.string()), 1);
  EXPECT_EQ(run_tool("prepare --phantoms 3 --size 128 --out " + (dir / "ds").string()), 0);
  std::ofstream(dir / "bad.json") << R"({"preset": "desk", "schedule": {"momentum": "high"}})";
  EXPECT_EQ(run_tool("train --config " + (dir / "bad.json").string() + " --out " + (dir / "t").string()), 1);
  EXPECT_EQ(run_tool("infer --checkpoint " + (dir / "none.sbre").string() + " --out " + (dir / "i").string() + " " +
                     (dir / "ds/images/phantom_0000_img.png").string()),
            2);
  EXPECT_EQ(run_tool("evaluate --manifest " + (dir / "ds/manifest.json").string() + " --pred " +
                     (dir / "ds/labels").string() + " --out " + (dir / "e").string()),
            1);
  EXPECT_EQ(setenv("SEBRE_THREADS", "zero", 1), 0);
  EXPECT_EQ(run_tool("prepare --phantoms 3 --size 128 --out " + (dir / "ds2").string()), 1);
  unsetenv("SEBRE_THREADS");
}
