// Command-line front end: scene synthesis, configured forward passes,
// dense-oracle checks, the complexity benchmark, and the toy segmentation
// training loop. Every subcommand emits one JSON report.

#include "octattn/harness.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

using octattn::Json;
using octattn::PointCloud;
using octattn::PointFormat;
using octattn::RunConfig;
using octattn::SynthSpec;

struct CommonArgs {
  std::string config_path;
  std::string out_path;
  std::string mode;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool wod = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file (unknown keys rejected)");
  cmd->add_option("--out", args.out_path, "write the JSON report here instead of stdout");
  cmd->add_option("--mode", args.mode, "selection mode")
      ->check(CLI::IsMember({"train", "infer"}));
  cmd->add_option("--seed", args.seed, "RNG seed")->each([&](const std::string&) {
    args.seed_given = true;
  });
  cmd->add_flag("--wod", args.wod, "use the WOD voxel size preset");
}

RunConfig resolve_config(const CommonArgs& args) {
  RunConfig cfg;
  if (!args.config_path.empty()) {
    std::ifstream in(args.config_path);
    if (!in) throw std::runtime_error("cannot open " + args.config_path);
    Json j = Json::parse(in);
    cfg = octattn::config_from_json(j);
  }
  if (args.wod) octattn::apply_wod_preset(cfg);
  if (args.seed_given) cfg.seed = args.seed;
  if (args.mode == "train") cfg.mode = octattn::SelectMode::Train;
  if (args.mode == "infer") cfg.mode = octattn::SelectMode::Infer;
  cfg.validate();
  return cfg;
}

struct SceneArgs {
  std::string input_path;
  std::string format = "csv";
  SynthSpec synth;
};

void add_scene(CLI::App* cmd, SceneArgs& args) {
  cmd->add_option("--input", args.input_path, "point file; omit to synthesize a scene");
  cmd->add_option("--format", args.format, "point file format")
      ->check(CLI::IsMember({"csv", "bin"}));
  cmd->add_option("--objects", args.synth.n_objects, "synthetic object count");
  cmd->add_option("--points-per-object", args.synth.points_per_object,
                  "points per synthetic object");
  cmd->add_option("--background", args.synth.background_points, "background point count");
}

PointFormat parse_format(const std::string& f) {
  return f == "bin" ? PointFormat::BinF32x4 : PointFormat::Csv;
}

std::vector<PointCloud> resolve_clouds(const SceneArgs& args, const RunConfig& cfg) {
  if (!args.input_path.empty())
    return {octattn::load_points(args.input_path, parse_format(args.format))};
  SynthSpec spec = args.synth;
  spec.seed = cfg.seed;
  return {octattn::synth_scene(spec, cfg.range_min, cfg.range_max).cloud};
}

void emit(const Json& j, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << j.dump(2) << std::endl;
    return;
  }
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot open " + out_path);
  out << j.dump(2) << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"octree-sparsified attention verification harness"};
  app.require_subcommand(1);

  CommonArgs fwd_common, ora_common, bench_common, train_common, synth_common;
  SceneArgs fwd_scene, ora_scene;

  auto* fwd = app.add_subcommand("forward", "embed + segmentation + stacked OTB layers");
  add_common(fwd, fwd_common);
  add_scene(fwd, fwd_scene);

  auto* ora = app.add_subcommand("oracle", "compare against the dense per-level reference");
  add_common(ora, ora_common);
  add_scene(ora, ora_scene);

  auto* bench = app.add_subcommand("bench", "attention MAC scaling sweep");
  add_common(bench, bench_common);
  std::vector<octattn::Index> sizes{1024, 2048, 4096, 8192, 16384, 32768};
  bench->add_option("--sizes", sizes, "ascending non-empty voxel targets");

  auto* train = app.add_subcommand("train-seg", "gradient descent on the segmentation branch");
  add_common(train, train_common);
  SynthSpec train_spec;
  train_spec.n_objects = 2;
  train_spec.points_per_object = 256;
  train_spec.background_points = 512;
  int steps = 200;
  double lr = 2.0;
  train->add_option("--objects", train_spec.n_objects, "synthetic object count");
  train->add_option("--points-per-object", train_spec.points_per_object,
                    "points per synthetic object");
  train->add_option("--background", train_spec.background_points, "background point count");
  train->add_option("--steps", steps, "gradient descent steps");
  train->add_option("--lr", lr, "learning rate");

  auto* synth = app.add_subcommand("synth", "write a synthetic scene to disk");
  add_common(synth, synth_common);
  SynthSpec synth_spec;
  std::string points_out = "scene_points.csv";
  std::string boxes_out = "scene_boxes.csv";
  std::string synth_format = "csv";
  synth->add_option("--objects", synth_spec.n_objects, "object count");
  synth->add_option("--points-per-object", synth_spec.points_per_object,
                    "points per object");
  synth->add_option("--background", synth_spec.background_points, "background point count");
  synth->add_option("--points-out", points_out, "point file to write");
  synth->add_option("--boxes-out", boxes_out, "box CSV to write");
  synth->add_option("--format", synth_format, "point file format")
      ->check(CLI::IsMember({"csv", "bin"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*fwd) {
      RunConfig cfg = resolve_config(fwd_common);
      emit(octattn::run_forward(cfg, resolve_clouds(fwd_scene, cfg)), fwd_common.out_path);
    } else if (*ora) {
      RunConfig cfg = resolve_config(ora_common);
      emit(octattn::run_oracle(cfg, resolve_clouds(ora_scene, cfg)), ora_common.out_path);
    } else if (*bench) {
      RunConfig cfg = resolve_config(bench_common);
      emit(octattn::run_bench(cfg, sizes), bench_common.out_path);
    } else if (*train) {
      RunConfig cfg = resolve_config(train_common);
      train_spec.seed = cfg.seed;
      emit(octattn::run_trainseg(cfg, train_spec, steps, lr), train_common.out_path);
    } else if (*synth) {
      RunConfig cfg = resolve_config(synth_common);
      synth_spec.seed = cfg.seed;
      emit(octattn::run_synth(cfg, synth_spec, points_out, boxes_out,
                              parse_format(synth_format)),
           synth_common.out_path);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
