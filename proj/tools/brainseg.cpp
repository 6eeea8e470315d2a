// brainseg: prepare datasets, train, run inference and evaluate.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

#include <iostream>

#include "CLI11.hpp"
#include "brainseg/cli.hpp"
#include "brainseg/errors.hpp"
#include "brainseg/train.hpp"

using namespace brainseg;

namespace {

std::pair<std::string, fs::path> parse_named_dir(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == text.size()) {
    throw ValidationError("--compare expects name=dir, got '" + text + "'");
  }
  return {text.substr(0, eq), text.substr(eq + 1)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Brain-region instance segmentation"};
  app.require_subcommand(1);

  PrepareOptions prep;
  std::string rotations, in_dir, prep_out;
  auto* prepare = app.add_subcommand("prepare", "Build a dataset manifest from label images or phantoms");
  prepare->add_option("--in", in_dir, "Directory of <stem>_img.png / <stem>_lbl.png pairs");
  prepare->add_option("--phantoms", prep.phantoms, "Generate this many synthetic sections instead");
  prepare->add_option("--size", prep.phantom_size, "Phantom extent in pixels")->capture_default_str();
  prepare->add_option("--profile", prep.profile, "Region profile: mouse8, hippo4, human8")->capture_default_str();
  prepare->add_option("--rotations", rotations, "Rotation sweep lo:hi:step in degrees");
  prepare->add_flag("--with-zero", prep.include_zero, "Keep 0 degrees in the sweep");
  prepare->add_flag("--no-zero", "Drop 0 degrees from the sweep (default)");
  prepare->add_flag("--flip", prep.flip, "Add horizontally mirrored variants");
  prepare->add_option("--factor", prep.factor, "Downsampling factor in (0,1]")->capture_default_str();
  prepare->add_option("--train-fraction", prep.train_fraction, "Share of sources used for training");
  prepare->add_option("--unknown-tolerance", prep.unknown_tolerance, "Unmatched label pixels allowed per image");
  prepare->add_option("--seed", prep.seed, "Seed for phantoms and the split")->capture_default_str();
  prepare->add_option("--out", prep_out, "Output directory")->required();

  TrainOptions train;
  std::string train_config, train_out;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a run config");
  train_cmd->add_option("--config", train_config, "Run config JSON")->required();
  train_cmd->add_option("--seed", train.seed, "Override the config seed");
  train_cmd->add_option("--set", train.overrides, "Override a config field: dotted.path=value");
  train_cmd->add_option("--out", train_out, "Output directory")->required();

  InferOptions infer;
  std::string ckpt, infer_manifest, infer_out;
  std::vector<std::string> images;
  auto* infer_cmd = app.add_subcommand("infer", "Segment images with a trained checkpoint");
  infer_cmd->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  infer_cmd->add_option("--manifest", infer_manifest, "Take images from a manifest instead");
  infer_cmd->add_option("--split", infer.split, "Manifest split: train, test or all")->capture_default_str();
  infer_cmd->add_option("--out", infer_out, "Output directory")->required();
  infer_cmd->add_option("images", images, "Image files (PNG)");

  EvaluateOptions eval;
  std::string eval_manifest, pred_dir, eval_out, averaging = "class";
  std::vector<std::string> compare;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score predictions against a manifest");
  eval_cmd->add_option("--manifest", eval_manifest, "Dataset manifest")->required();
  eval_cmd->add_option("--pred", pred_dir, "Prediction directory")->required();
  eval_cmd->add_option("--name", eval.name, "Name of the evaluated method")->capture_default_str();
  eval_cmd->add_option("--compare", compare, "Further methods as name=dir");
  eval_cmd->add_option("--split", eval.split, "Manifest split: train, test or all")->capture_default_str();
  eval_cmd->add_option("--iou", eval.iou_threshold, "Mask IoU for a true positive")->capture_default_str();
  eval_cmd->add_option("--ap-mode", averaging, "AP averaging: class or section")->capture_default_str();
  eval_cmd->add_option("--out", eval_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    apply_thread_limit();
    if (*prepare) {
      if (!rotations.empty()) {
        prep.use_rotations = true;
        prep.rotations = parse_rotation_sweep(rotations);
      }
      prep.input_dir = in_dir;
      prep.out_dir = prep_out;
      const auto s = cmd_prepare(prep);
      for (const auto& w : s.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << s.sources << " sources, " << s.records << " records (" << s.train_records << " train, "
                << s.test_records << " test)\n";
    } else if (*train_cmd) {
      train.config_path = train_config;
      train.has_seed = train_cmd->count("--seed") > 0;
      train.out_dir = train_out;
      const auto trace = cmd_train(train);
      std::cout << trace.size() << " steps, final loss " << (trace.empty() ? 0.0 : trace.back().loss.total) << "\n";
    } else if (*infer_cmd) {
      infer.checkpoint = ckpt;
      infer.manifest = infer_manifest;
      for (const auto& i : images) infer.images.emplace_back(i);
      infer.out_dir = infer_out;
      const auto s = cmd_infer(infer);
      for (const auto& w : s.skipped) std::cerr << "warning: skipped " << w << "\n";
      std::cout << s.processed << " images\n";
    } else if (*eval_cmd) {
      eval.manifest = eval_manifest;
      eval.predictions = pred_dir;
      eval.out_dir = eval_out;
      for (const auto& c : compare) eval.compare.push_back(parse_named_dir(c));
      if (averaging == "class") {
        eval.averaging = ApAveraging::kClassMean;
      } else if (averaging == "section") {
        eval.averaging = ApAveraging::kSectionMean;
      } else {
        throw ValidationError("--ap-mode must be class or section");
      }
      for (const auto& r : cmd_evaluate(eval)) std::cout << r.name << " mean AP " << r.result.mean_ap << "\n";
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const RuntimeFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
