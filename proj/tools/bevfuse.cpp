// bevfuse command line: gen | train | eval | ablate | grad-check | bench.
// Exit codes: 0 success, 1 contract (or other runtime) error, 2 config error.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bevfuse/config.hpp"
#include "bevfuse/error.hpp"
#include "bevfuse/pipeline.hpp"
#include "bevfuse/serialize.hpp"

namespace fs = std::filesystem;
using namespace bevfuse;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  std::string occ_supervision, lgaft_residual, stage;
  std::optional<std::size_t> steps;
  std::string checkpoint, scenes;
};

PipelineConfig resolve(const Options& o, const std::string& default_preset) {
  PipelineConfig cfg = o.config.empty() ? preset_config(default_preset) : load_config(o.config);
  const auto set = [&](const std::string& key, const std::string& value) {
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("command line: ") + e.what());
    }
  };
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) set("seed", std::to_string(*o.seed));
  if (!o.occ_supervision.empty()) set("train.occ_supervision", o.occ_supervision);
  if (!o.lgaft_residual.empty()) set("fusion.residual", o.lgaft_residual);
  if (!o.stage.empty()) set("train.stage", o.stage);
  if (o.steps) set("train.steps", std::to_string(*o.steps));
  cfg.sync();
  cfg.validate();
  return cfg;
}

std::vector<Scene> load_scenes(const fs::path& root) {
  if (!fs::is_directory(root)) throw ContractError(root.string() + ": scene directory not found");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "scene.json")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw ContractError(root.string() + ": no scene directories (expected */scene.json)");
  std::vector<Scene> scenes;
  for (const auto& d : dirs) scenes.push_back(load_scene(d));
  return scenes;
}

std::vector<Scene> scenes_for(const Options& o, const PipelineConfig& cfg) {
  return o.scenes.empty() ? make_scenes(cfg) : load_scenes(o.scenes);
}

void print(const nlohmann::json& j) { std::cout << j.dump() << '\n' << std::flush; }

int run_gen(const Options& o) {
  const auto cfg = resolve(o, "desk");
  const fs::path out = o.out.empty() ? "scenes" : o.out;
  const auto scenes = make_scenes(cfg);
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%03zu", s);
    PipelineConfig c = cfg;
    c.sync();
    save_scene(out / name, c.scene, scenes[s]);
    std::size_t points = 0, boxes = 0;
    for (const auto& f : scenes[s]) {
      points += f.points.size();
      boxes += f.gt_boxes.size();
    }
    print({{"event", "scene"}, {"dir", (out / name).string()}, {"frames", scenes[s].size()},
           {"points", points}, {"boxes", boxes}});
  }
  write_file(out / "config.txt", dump_config(cfg));
  return 0;
}

int run_train(const Options& o) {
  const auto cfg = resolve(o, "desk");
  const fs::path out = o.out.empty() ? "run" : o.out;
  fs::create_directories(out);
  write_file(out / "config.txt", dump_config(cfg));
  Model model(cfg);
  if (!o.checkpoint.empty()) load_checkpoint(o.checkpoint, model.params());
  const auto report = train(model, scenes_for(o, cfg), RunSink{out, &std::cout});
  return report.final_eval ? 0 : 1;
}

int run_eval(const Options& o) {
  const auto cfg = resolve(o, "desk");
  if (o.checkpoint.empty()) throw ContractError("eval needs --checkpoint PATH");
  const fs::path out = o.out.empty() ? "eval" : o.out;
  Model model(cfg);
  load_checkpoint(o.checkpoint, model.params());
  eval_command(model, scenes_for(o, cfg), RunSink{out, &std::cout});
  return 0;
}

int run_ablate(const Options& o) {
  const auto cfg = resolve(o, "desk");
  const fs::path out = o.out.empty() ? "ablation" : o.out;
  fs::create_directories(out);
  write_file(out / "config.txt", dump_config(cfg));
  const auto rows = ablate(cfg, RunSink{out, &std::cout});
  std::cout << ablation_markdown(rows);
  return 0;
}

int run_grad_check(const Options& o) {
  const auto cfg = resolve(o, "micro");
  const auto rep = grad_check(cfg);
  auto j = rep.to_json();
  j["event"] = "grad_check";
  j["threshold"] = 1e-4;
  j["pass"] = rep.max_rel_error < 1e-4;
  print(j);
  if (!o.out.empty()) write_file(fs::path(o.out) / "grad_check.json", j.dump(2) + "\n");
  return rep.max_rel_error < 1e-4 ? 0 : 1;
}

int run_bench(const Options& o) {
  const auto cfg = resolve(o, "desk");
  const auto entries = bench(cfg);
  nlohmann::json all = nlohmann::json::array();
  std::string csv = "op,backend,ns_per_op,iterations\n";
  for (const auto& e : entries) {
    nlohmann::json j = {{"event", "bench"}, {"op", e.op}, {"backend", e.backend}, {"ns_per_op", e.ns_per_op},
                        {"iterations", e.iterations}};
    print(j);
    all.push_back(j);
    csv += e.op + "," + e.backend + "," + std::to_string(e.ns_per_op) + "," + std::to_string(e.iterations) + "\n";
  }
  if (!o.out.empty()) {
    write_file(fs::path(o.out) / "bench.json", all.dump(2) + "\n");
    write_file(fs::path(o.out) / "bench.csv", csv);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bevfuse: LiDAR-camera BEV fusion detector on synthetic scenes"};
  app.require_subcommand(1);
  Options opt;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "flat key=value config file (defaults are used without one)");
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { opt.seed = s; }, "override seed");
    sub->add_option("--out", opt.out, "output directory");
    sub->add_option("--set", opt.overrides, "override one config key, key=value (repeatable)");
    sub->add_option("--occ-supervision", opt.occ_supervision, "on|off")->check(CLI::IsMember({"on", "off"}));
    sub->add_option("--lgaft-residual", opt.lgaft_residual, "on|off")->check(CLI::IsMember({"on", "off"}));
    sub->add_option("--stage", opt.stage, "joint|lidar|fusion")->check(CLI::IsMember({"joint", "lidar", "fusion"}));
    sub->add_option_function<std::size_t>("--steps", [&](const std::size_t& s) { opt.steps = s; }, "training steps");
    sub->add_option("--scenes", opt.scenes, "directory written by `gen` (scenes are generated otherwise)");
  };

  auto* gen = app.add_subcommand("gen", "generate the synthetic scene set");
  auto* tr = app.add_subcommand("train", "train and write checkpoint + RunReport");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  auto* ab = app.add_subcommand("ablate", "train/eval every ablation row");
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of the full micro pipeline");
  auto* be = app.add_subcommand("bench", "ns/op of the main kernels, serial and parallel");
  for (auto* s : {gen, tr, ev, ab, gc, be}) common(s);
  tr->add_option("--init", opt.checkpoint, "start from this checkpoint (e.g. a --stage lidar run)");
  ev->add_option("--checkpoint", opt.checkpoint, "checkpoint.bin to evaluate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return run_gen(opt);
    if (*tr) return run_train(opt);
    if (*ev) return run_eval(opt);
    if (*ab) return run_ablate(opt);
    if (*gc) return run_grad_check(opt);
    if (*be) return run_bench(opt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
