#include "bevfuse/pipeline.hpp"

#include <cctype>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>

#include "bevfuse/error.hpp"
#include "bevfuse/ops.hpp"
#include "bevfuse/rng.hpp"
#include "bevfuse/serialize.hpp"

namespace bevfuse {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

nlohmann::json terms_json(const LossTerms& t) {
  return {{"total", t.total},         {"detection", t.detection}, {"heatmap", t.heatmap},
          {"regression", t.regression}, {"depth", t.depth},         {"occupancy", t.occupancy}};
}

nlohmann::json eval_json(const EvalSummary& e) {
  nlohmann::json ap = nlohmann::json::object();
  for (std::size_t k = 0; k < e.ap.size(); ++k) ap["class_" + std::to_string(k)] = e.ap[k];
  return {{"ap", ap},
          {"losses", terms_json(e.mean_terms)},
          {"frames", e.frames},
          {"predictions", e.predictions},
          {"ground_truth", e.ground_truth}};
}

void emit(const RunSink& sink, std::ofstream* file, const nlohmann::json& line) {
  const std::string text = line.dump();
  if (sink.metrics) *sink.metrics << text << '\n' << std::flush;
  if (file && file->is_open()) *file << text << '\n';
}

using PreparedScenes = std::vector<std::vector<PreparedFrame>>;

PreparedScenes prepare_all(const Model& model, const std::vector<Scene>& scenes) {
  PreparedScenes out;
  for (const auto& scene : scenes) {
    out.emplace_back();
    for (const auto& f : scene) out.back().push_back(model.prepare(f));
  }
  return out;
}

EvalSummary evaluate_prepared(const Model& model, const PreparedScenes& scenes) {
  const auto& cfg = model.config();
  const bool lidar_only = cfg.stage == TrainStage::lidar;
  NoGradGuard no_grad;
  std::vector<FrameBox> preds, gts;
  EvalSummary s;
  LossTerms sum;
  for (const auto& scene : scenes) {
    BevBuffer buffer = model.make_buffer();
    for (const auto& f : scene) {
      const auto r = model.forward(f, buffer, lidar_only);
      for (const auto& b : r.detections) preds.push_back({f.frame_id, b});
      for (const auto& b : f.gt_boxes) gts.push_back({f.frame_id, b});
      sum.total += r.terms.total;
      sum.detection += r.terms.detection;
      sum.heatmap += r.terms.heatmap;
      sum.regression += r.terms.regression;
      sum.depth += r.terms.depth;
      sum.occupancy += r.terms.occupancy;
      ++s.frames;
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, s.frames));
  s.mean_terms = {sum.heatmap / n, sum.regression / n, sum.detection / n, sum.depth / n, sum.occupancy / n,
                  sum.total / n};
  for (std::size_t k = 0; k < cfg.classes; ++k)
    s.ap.push_back(average_precision(preds, gts, cfg.iou_thresh, static_cast<int>(k)));
  s.predictions = preds.size();
  s.ground_truth = gts.size();
  s.detections = std::move(preds);
  s.gt_boxes = std::move(gts);
  return s;
}

void write_run(const RunSink& sink, const RunReport& report, const std::string& checkpoint) {
  if (sink.dir.empty()) return;
  if (!checkpoint.empty()) write_file(sink.dir / "checkpoint.bin", checkpoint);
  write_file(sink.dir / "run_report.json", report.to_json().dump(2) + "\n");
  std::ostringstream csv;
  csv.precision(17);
  csv << "step,frame_id,total,detection,heatmap,regression,depth,occupancy,grad_norm\n";
  for (const auto& s : report.steps) {
    csv << s.step << ',' << s.frame_id << ',' << s.terms.total << ',' << s.terms.detection << ',' << s.terms.heatmap
        << ',' << s.terms.regression << ',' << s.terms.depth << ',' << s.terms.occupancy << ',' << s.grad_norm << '\n';
  }
  write_file(sink.dir / "losses.csv", csv.str());
}

std::ofstream open_metrics(const RunSink& sink) {
  std::ofstream f;
  if (!sink.dir.empty()) {
    std::filesystem::create_directories(sink.dir);
    f.open(sink.dir / "metrics.jsonl", std::ios::trunc);
  }
  return f;
}

}  // namespace

nlohmann::json RunReport::to_json(bool with_wall_clock) const {
  nlohmann::json j;
  j["command"] = command;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  j["stage"] = stage;
  nlohmann::json steps_j = nlohmann::json::array();
  for (const auto& s : steps) {
    nlohmann::json sj = terms_json(s.terms);
    sj["step"] = s.step;
    sj["frame_id"] = s.frame_id;
    sj["grad_norm"] = s.grad_norm;
    steps_j.push_back(sj);
  }
  j["steps"] = steps_j;
  if (initial) j["initial"] = eval_json(*initial);
  if (final_eval) j["final"] = eval_json(*final_eval);
  j["checkpoint_sha1"] = checkpoint_sha1;
  if (with_wall_clock) j["wall_clock_s"] = wall_clock_s;
  return j;
}

std::vector<Scene> make_scenes(const PipelineConfig& cfg) {
  PipelineConfig c = cfg;
  c.sync();
  return generate_scene_set(c.scene, c.n_scenes);
}

void apply_backend(const PipelineConfig& cfg) {
  kernels::set_backend(cfg.backend == "serial" ? kernels::Backend::serial : kernels::Backend::parallel);
}

std::size_t apply_stage(Model& model) {
  auto& store = model.params();
  for (auto& p : store.all()) p.frozen = false;
  if (model.config().stage == TrainStage::fusion) return store.set_frozen("lidar.", true);
  return 0;
}

EvalSummary evaluate(const Model& model, const std::vector<Scene>& scenes) {
  return evaluate_prepared(model, prepare_all(model, scenes));
}

RunReport train(Model& model, const std::vector<Scene>& scenes, const RunSink& sink) {
  const auto t0 = Clock::now();
  const auto& cfg = model.config();
  apply_backend(cfg);
  apply_stage(model);
  auto metrics = open_metrics(sink);
  const auto prepared = prepare_all(model, scenes);
  std::vector<std::pair<std::size_t, std::size_t>> order;
  for (std::size_t s = 0; s < prepared.size(); ++s)
    for (std::size_t i = 0; i < prepared[s].size(); ++i) order.emplace_back(s, i);
  if (order.empty()) throw ContractError("train: no frames");

  RunReport rep;
  rep.command = "train";
  rep.config_hash = config_hash(cfg);
  rep.seed = cfg.seed;
  rep.stage = to_string(cfg.stage);
  rep.initial = evaluate_prepared(model, prepared);
  emit(sink, &metrics, {{"event", "eval"}, {"phase", "initial"}, {"summary", eval_json(*rep.initial)}});

  const bool lidar_only = cfg.stage == TrainStage::lidar;
  auto& store = model.params();
  Adam opt(cfg.lr);
  BevBuffer buffer = model.make_buffer();
  std::size_t cursor = 0;
  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_frames);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (cfg.cosine_lr)
      opt.set_lr(0.5 * cfg.lr *
                 (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(cfg.steps))));
    store.zero_grad();
    LossTerms mean;
    std::int64_t first_frame = 0;
    for (std::size_t b = 0; b < cfg.batch_frames; ++b, ++cursor) {
      const auto [s, i] = order[cursor % order.size()];
      if (i == 0) buffer.reset();
      const auto& frame = prepared[s][i];
      if (b == 0) first_frame = frame.frame_id;
      const auto r = model.forward(frame, buffer, lidar_only);
      scale(r.loss, inv_batch).backward();
      mean.total += r.terms.total * inv_batch;
      mean.detection += r.terms.detection * inv_batch;
      mean.heatmap += r.terms.heatmap * inv_batch;
      mean.regression += r.terms.regression * inv_batch;
      mean.depth += r.terms.depth * inv_batch;
      mean.occupancy += r.terms.occupancy * inv_batch;
    }
    const double clip = cfg.grad_clip > 0 ? cfg.grad_clip : std::numeric_limits<double>::infinity();
    const double norm = clip_grad_norm(store, clip);
    opt.step(store);
    rep.steps.push_back({step, first_frame, mean, norm});
    nlohmann::json line = terms_json(mean);
    line["event"] = "step";
    line["step"] = step;
    line["frame_id"] = first_frame;
    line["grad_norm"] = norm;
    emit(sink, &metrics, line);
  }

  rep.final_eval = evaluate_prepared(model, prepared);
  emit(sink, &metrics, {{"event", "eval"}, {"phase", "final"}, {"summary", eval_json(*rep.final_eval)}});
  const std::string ckpt = checkpoint_bytes(store);
  rep.checkpoint_sha1 = git_blob_sha1(ckpt);
  rep.wall_clock_s = seconds_since(t0);
  emit(sink, &metrics,
       {{"event", "done"}, {"checkpoint_sha1", rep.checkpoint_sha1}, {"config_hash", rep.config_hash},
        {"wall_clock_s", rep.wall_clock_s}});
  write_run(sink, rep, ckpt);
  return rep;
}

RunReport eval_command(Model& model, const std::vector<Scene>& scenes, const RunSink& sink) {
  const auto t0 = Clock::now();
  apply_backend(model.config());
  auto metrics = open_metrics(sink);
  RunReport rep;
  rep.command = "eval";
  rep.config_hash = config_hash(model.config());
  rep.seed = model.config().seed;
  rep.stage = to_string(model.config().stage);
  rep.final_eval = evaluate(model, scenes);
  rep.checkpoint_sha1 = git_blob_sha1(checkpoint_bytes(model.params()));
  rep.wall_clock_s = seconds_since(t0);
  emit(sink, &metrics, {{"event", "eval"}, {"phase", "final"}, {"summary", eval_json(*rep.final_eval)}});
  write_run(sink, rep, "");
  if (!sink.dir.empty()) {
    write_file(sink.dir / "predictions.jsonl", boxes_to_jsonl(rep.final_eval->detections));
    write_file(sink.dir / "ground_truth.jsonl", boxes_to_jsonl(rep.final_eval->gt_boxes));
  }
  return rep;
}

std::vector<AblationRow> ablate(const PipelineConfig& base, const RunSink& sink) {
  std::vector<std::pair<std::string, PipelineConfig>> guidance, fusion, scales;
  for (bool sdg : {false, true})
    for (bool log : {false, true}) {
      PipelineConfig c = base;
      c.sdg = sdg;
      c.log = log;
      guidance.emplace_back(std::string("SDG ") + (sdg ? "on" : "off") + ", LOG " + (log ? "on" : "off"), c);
    }
  for (auto s : {FusionStrategy::add, FusionStrategy::concat, FusionStrategy::lgft, FusionStrategy::lgaft}) {
    PipelineConfig c = base;
    c.fusion.strategy = s;
    fusion.emplace_back(to_string(s), c);
  }
  for (std::size_t n = 0; n <= 4; ++n) {
    PipelineConfig c = base;
    c.msdpt_scales = n;
    scales.emplace_back(n == 0 ? std::string("off") : std::to_string(n) + (n == 1 ? " scale" : " scales"), c);
  }

  const auto scenes = make_scenes(base);
  std::vector<AblationRow> rows;
  const auto run_table = [&](const std::string& table, const std::vector<std::pair<std::string, PipelineConfig>>& v) {
    for (const auto& [label, c] : v) {
      PipelineConfig cfg = c;
      cfg.sync();
      Model model(cfg);
      RunSink row_sink;
      if (!sink.dir.empty()) {
        std::string slug = table + "_" + label;
        for (auto& ch : slug)
          if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
        row_sink.dir = sink.dir / "runs" / slug;
      }
      AblationRow row{table, label, cfg, train(model, scenes, row_sink)};
      if (sink.metrics) {
        nlohmann::json line = {{"event", "ablation_row"}, {"table", table}, {"label", label},
                               {"summary", eval_json(*row.report.final_eval)},
                               {"checkpoint_sha1", row.report.checkpoint_sha1}};
        *sink.metrics << line.dump() << '\n' << std::flush;
      }
      rows.push_back(std::move(row));
    }
  };
  run_table("guidance", guidance);
  run_table("fusion", fusion);
  run_table("msdpt", scales);
  if (!sink.dir.empty()) {
    write_file(sink.dir / "ablation.md", ablation_markdown(rows));
    write_file(sink.dir / "ablation.json", ablation_json(rows).dump(2) + "\n");
  }
  return rows;
}

namespace {

double row_ap(const AblationRow& r) { return r.report.final_eval ? r.report.final_eval->ap.at(0) : 0.0; }

const AblationRow* find_row(const std::vector<AblationRow>& rows, const std::string& table, const std::string& label) {
  for (const auto& r : rows)
    if (r.table == table && r.label == label) return &r;
  return nullptr;
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

}  // namespace

std::string ablation_markdown(const std::vector<AblationRow>& rows) {
  static const std::vector<std::pair<std::string, std::string>> titles = {
      {"guidance", "LiDAR guidance"}, {"fusion", "BEV fusion strategy"}, {"msdpt", "MSDPT scales"}};
  std::ostringstream md;
  md << "# Ablation\n";
  for (const auto& [table, title] : titles) {
    md << "\n## " << title << "\n\n| variant | AP@" << (rows.empty() ? 0.5 : rows.front().cfg.iou_thresh)
       << " | initial det. loss | final det. loss | steps | config hash |\n|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
      if (r.table != table) continue;
      const auto& rep = r.report;
      md << "| " << r.label << " | " << fixed(row_ap(r), 4) << " | "
         << fixed(rep.initial ? rep.initial->mean_terms.detection : 0.0, 4) << " | "
         << fixed(rep.final_eval ? rep.final_eval->mean_terms.detection : 0.0, 4) << " | " << rep.steps.size()
         << " | `" << rep.config_hash << "` |\n";
    }
  }
  // Directional comparisons are reported only; small synthetic runs can invert them.
  md << "\n## Directional checks (reported, not asserted)\n\n";
  const auto compare = [&](const std::string& what, const AblationRow* a, const AblationRow* b) {
    if (!a || !b) return;
    md << "- " << what << ": " << fixed(row_ap(*a), 4) << " vs " << fixed(row_ap(*b), 4) << " ("
       << (row_ap(*a) >= row_ap(*b) ? "holds" : "inverted") << ")\n";
  };
  compare("SDG + LOG >= neither", find_row(rows, "guidance", "SDG on, LOG on"),
          find_row(rows, "guidance", "SDG off, LOG off"));
  compare("lgaft >= add", find_row(rows, "fusion", "lgaft"), find_row(rows, "fusion", "add"));
  compare("lgaft >= lgft", find_row(rows, "fusion", "lgaft"), find_row(rows, "fusion", "lgft"));
  compare("3 scales >= off", find_row(rows, "msdpt", "3 scales"), find_row(rows, "msdpt", "off"));
  return md.str();
}

nlohmann::json ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& r : rows) {
    nlohmann::json j = r.report.to_json(false);
    j.erase("steps");
    j["label"] = r.label;
    j["sdg"] = r.cfg.sdg;
    j["log"] = r.cfg.log;
    j["fusion"] = to_string(r.cfg.fusion.strategy);
    j["msdpt_scales"] = r.cfg.msdpt_scales;
    j["wall_clock_s"] = r.report.wall_clock_s;
    out[r.table].push_back(j);
  }
  return out;
}

nlohmann::json GradCheckReport::to_json() const {
  return {{"parameters", parameters}, {"checked", checked}, {"max_rel_error", max_rel_error},
          {"worst", worst},           {"loss", loss}};
}

Scene grad_check_scene(const PipelineConfig& cfg) {
  PipelineConfig c = cfg;
  c.sync();
  SceneConfig sc = c.scene;
  sc.n_frames = 2;
  Scene frames = generate_scene(sc);
  const auto grid = c.voxel.grid_shape();
  for (auto& f : frames) {
    // Voxels at multiples of 8 along x and y (and z = 0) are the ones a
    // k = 1 strided chain keeps down to strides 8, 16 and 32.
    for (std::int32_t xi = 0; xi < grid[0]; xi += 8)
      for (std::int32_t yi = 0; yi < grid[1]; yi += 8) {
        const double x = c.voxel.range_min[0] + (xi + 0.3) * c.voxel.voxel_size[0];
        const double y = c.voxel.range_min[1] + (yi + 0.6) * c.voxel.voxel_size[1];
        const double z = c.voxel.range_min[2] + 0.4 * c.voxel.voxel_size[2];
        f.points.push_back({x, y, z, 0.1 + 0.05 * static_cast<double>((xi + 2 * yi) % 7)});
      }
  }
  return frames;
}

GradCheckReport grad_check(const PipelineConfig& cfg) {
  apply_backend(cfg);
  Model model(cfg);
  const Scene scene = grad_check_scene(model.config());
  // Zero-initialised biases put ReLU inputs exactly on the kink; check at a
  // generic point near the initialisation instead.
  for (auto& p : model.params().all()) {
    Rng rng(cfg.seed, "grad_check/" + p.name);
    for (auto& v : p.tensor.mutable_values()) v += rng.uniform(-0.1, 0.1);
  }
  const auto f0 = model.prepare(scene.at(0));
  const auto f1 = model.prepare(scene.at(1));

  // History from the unperturbed parameters; it is detached in the analytic
  // gradient, so the numeric side must hold it fixed too.
  BevBuffer history = model.make_buffer();
  {
    NoGradGuard no_grad;
    model.forward(f0, history);
  }
  auto& store = model.params();
  store.zero_grad();
  BevBuffer b = history;
  const auto r = model.forward(f1, b);
  r.loss.backward();

  GradCheckReport rep;
  rep.parameters = store.scalar_count();
  rep.loss = r.terms.total;
  constexpr double h = 1e-6;
  const auto loss_at = [&] {
    NoGradGuard no_grad;
    BevBuffer copy = history;
    return model.forward(f1, copy).terms.total;
  };
  for (auto& p : store.all()) {
    const std::vector<double> analytic = p.tensor.has_grad() ? std::vector<double>(p.tensor.grad().begin(), p.tensor.grad().end())
                                                             : std::vector<double>(p.tensor.numel(), 0.0);
    auto values = p.tensor.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double lp = loss_at();
      values[i] = orig - h;
      const double lm = loss_at();
      values[i] = orig;
      const double numeric = (lp - lm) / (2 * h);
      const double err = std::fabs(analytic[i] - numeric) / std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-4});
      ++rep.checked;
      if (err > rep.max_rel_error || rep.worst.empty()) {
        rep.max_rel_error = err;
        rep.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

std::vector<BenchEntry> bench(const PipelineConfig& cfg_in, double min_seconds) {
  PipelineConfig cfg = cfg_in;
  cfg.sync();
  NoGradGuard no_grad;
  Rng rng(cfg.seed, "bench");
  const auto random = [&](Shape shape) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::from(std::move(shape), std::move(v));
  };

  SceneConfig sc = cfg.scene;
  sc.n_frames = 1;
  const Frame frame = generate_scene(sc).at(0);
  const SparseVoxelSet voxels = voxelize(frame.points, cfg.voxel);
  const int k = cfg.sparse.kernel;
  const Tensor sparse_w = random({static_cast<std::size_t>(k * k * k), k_voxel_features, cfg.sparse.widths[0]});

  const std::size_t fh = cfg.scene.image_h / k_feature_stride, fw = cfg.scene.image_w / k_feature_stride;
  const auto plans = make_lift_plans(frame.cameras, fh, fw, cfg.camera.bins, cfg.volume);
  const Tensor feat = random({cfg.camera.volume_channels, fh, fw});
  const Tensor depth = softmax(random({cfg.camera.bins.count, fh, fw}), 0);

  ParameterStore store(cfg.seed);
  WindowAttention attn(store, "bench.attn", cfg.msdpt.attention);
  const Tensor slices = random({cfg.camera.volume_channels, cfg.volume.z, cfg.volume.bev.h, cfg.volume.bev.w});
  FusionConfig fc = cfg.fusion;
  fc.strategy = FusionStrategy::lgaft;
  BevFusion fusion(store, "bench.fusion", fc);
  const Tensor lidar = fusion.expand_channels(random({fc.lidar_channels, fc.h, fc.w}), BevFusion::Modality::lidar);
  const Tensor camera = fusion.expand_channels(random({fc.camera_channels, fc.h, fc.w}), BevFusion::Modality::camera);
  const Tensor weights = fusion.adaptive_weights(lidar, camera);

  const std::vector<std::pair<std::string, std::function<void()>>> ops = {
      {"sparse_conv3d", [&] { sparse_conv3d(voxels, sparse_w, k, 1, true); }},
      {"lift_splat", [&] { lift_splat(feat, depth, plans.at(0), cfg.volume); }},
      {"window_attention", [&] { attn.forward_slices(slices); }},
      {"lgaft_fuse", [&] { fusion.lgaft_fuse(lidar, camera, weights); }},
  };
  const auto previous = kernels::backend();
  std::vector<BenchEntry> out;
  for (auto be : {kernels::Backend::serial, kernels::Backend::parallel}) {
    kernels::set_backend(be);
    for (const auto& [name, fn] : ops) {
      fn();  // warm-up
      std::size_t iters = 0;
      const auto t0 = Clock::now();
      double elapsed = 0;
      do {
        fn();
        ++iters;
        elapsed = seconds_since(t0);
      } while (elapsed < min_seconds);
      out.push_back({name, be == kernels::Backend::serial ? "serial" : "parallel", elapsed * 1e9 / static_cast<double>(iters),
                     iters});
    }
  }
  kernels::set_backend(previous);
  return out;
}

}  // namespace bevfuse
