#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bevfuse/config.hpp"
#include "bevfuse/model.hpp"

namespace bevfuse {

using Scene = std::vector<Frame>;

struct StepRecord {
  std::size_t step = 0;
  std::int64_t frame_id = 0;
  LossTerms terms;
  double grad_norm = 0;
};

struct EvalSummary {
  std::vector<double> ap;  // per class, at cfg.iou_thresh
  LossTerms mean_terms;    // averaged over frames
  std::size_t frames = 0, predictions = 0, ground_truth = 0;
  std::vector<FrameBox> detections, gt_boxes;  // not part of the JSON summary
};

struct RunReport {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string stage;
  std::vector<StepRecord> steps;
  std::optional<EvalSummary> initial;  // before training, same frames as `final_eval`
  std::optional<EvalSummary> final_eval;
  double wall_clock_s = 0;
  std::string checkpoint_sha1;

  /// Wall-clock is the only field that differs between identical runs; leave
  /// it out to compare reports.
  nlohmann::json to_json(bool with_wall_clock = true) const;
};

/// Where a run writes its artifacts. Empty `dir` keeps everything in memory;
/// `metrics` (often std::cout) receives the JSON-lines stream.
struct RunSink {
  std::filesystem::path dir;
  std::ostream* metrics = nullptr;
};

/// The training set described by the config (scene.count scenes).
std::vector<Scene> make_scenes(const PipelineConfig& cfg);

/// Selects the kernel backend named in the config.
void apply_backend(const PipelineConfig& cfg);

/// Sets frozen flags for the configured stage; returns how many parameters are frozen.
std::size_t apply_stage(Model& model);

/// Adam over cfg.steps steps of cfg.batch_frames frames each, walking the
/// scenes in order (the history buffer is reset at every scene start). Evaluates on the same
/// frames before and after. Writes checkpoint.bin, run_report.json,
/// metrics.jsonl and losses.csv when the sink has a directory.
RunReport train(Model& model, const std::vector<Scene>& scenes, const RunSink& sink = {});

/// Inference over the scenes in order without gradients.
EvalSummary evaluate(const Model& model, const std::vector<Scene>& scenes);
RunReport eval_command(Model& model, const std::vector<Scene>& scenes, const RunSink& sink = {});

struct AblationRow {
  std::string table, label;
  PipelineConfig cfg;
  RunReport report;
};

/// Trains and evaluates every row of the three ablation tables (guidance
/// grid, fusion strategy, MSDPT scales) and writes ablation.md and
/// ablation.json to the sink directory.
std::vector<AblationRow> ablate(const PipelineConfig& base, const RunSink& sink = {});
std::string ablation_markdown(const std::vector<AblationRow>& rows);
nlohmann::json ablation_json(const std::vector<AblationRow>& rows);

struct GradCheckReport {
  std::size_t parameters = 0, checked = 0;
  double max_rel_error = 0;
  std::string worst;  // parameter name and index
  double loss = 0;
  nlohmann::json to_json() const;
};

/// Central differences (h = 1e-6) over every scalar parameter of the full
/// pipeline loss on a two-frame scene, with relative error
/// |a - n| / max(|a|, |n|, 1e-4). Parameters are first jittered by
/// uniform(-0.1, 0.1) so no ReLU input sits exactly at zero.
GradCheckReport grad_check(const PipelineConfig& cfg);

/// The scene used by grad_check: generated frames plus points placed at
/// voxels that survive every k = 1 strided level.
Scene grad_check_scene(const PipelineConfig& cfg);

struct BenchEntry {
  std::string op, backend;
  double ns_per_op = 0;
  std::size_t iterations = 0;
};
std::vector<BenchEntry> bench(const PipelineConfig& cfg, double min_seconds = 0.2);

}  // namespace bevfuse
