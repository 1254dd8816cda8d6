#pragma once

// Command implementations behind the CLI. Every command takes a validated
// RunConfig and an output directory, writes its artifacts there with fixed
// names, and finishes with a manifest (manifest_<command>.json) written via
// rename so readers never see a partial one.
//
// Output files:
//   synth         trajectories.csv
//   ingest        frames.bin, frames.bin.json, ingest_summary.json
//   train         model.ckpt, train_report.csv
//   evaluate      accuracy.json, accuracy.csv, ima.csv (with a baseline file)
//   distribution  distribution.csv, distribution.json, error_ratio.csv
//   sweep         sweep.csv

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajcaps/capsnet.hpp"
#include "trajcaps/checkpoint.hpp"
#include "trajcaps/csv.hpp"
#include "trajcaps/errors.hpp"
#include "trajcaps/evaluate.hpp"
#include "trajcaps/frame_io.hpp"
#include "trajcaps/ingest.hpp"
#include "trajcaps/run_config.hpp"

namespace trajcaps {

inline constexpr const char* kVersion = "0.1.0";

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Files and digests

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 failed");
  }
  std::ostringstream os;
  os << std::hex << std::setfill('0');
  for (unsigned int i = 0; i < len; ++i) os << std::setw(2) << static_cast<int>(md[i]);
  return os.str();
}

inline std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot read " + p.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline std::string file_sha256(const fs::path& p) { return sha256_hex(read_file(p)); }

/// Writes through a temporary sibling and renames it into place.
inline void write_atomic(const fs::path& p, std::string_view bytes) {
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw DataError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, p, ec);
  if (ec) throw DataError("cannot move " + tmp.string() + " to " + p.string() + ": " + ec.message());
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());
}

inline std::string fixed2(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", x);
  return buf;
}

// ---------------------------------------------------------------------------
// Run manifest

struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::vector<fs::path> inputs;
  std::vector<fs::path> artifacts;
  double wall_seconds = 0.0;
  nlohmann::json extra = nlohmann::json::object();
};

inline nlohmann::json manifest_json(const RunManifest& m) {
  nlohmann::json inputs = nlohmann::json::array();
  for (const auto& p : m.inputs) inputs.push_back({{"path", p.string()}, {"sha256", file_sha256(p)}});
  nlohmann::json artifacts = nlohmann::json::array();
  for (const auto& p : m.artifacts) artifacts.push_back({{"path", p.string()}, {"sha256", file_sha256(p)}});
  return {{"command", m.command},
          {"config", m.config},
          {"config_sha256", sha256_hex(m.config.dump())},
          {"seed", m.config.value("seed", std::uint64_t{0})},
          {"inputs", inputs},
          {"artifacts", artifacts},
          {"versions", {{"trajcaps", kVersion}, {"checkpoint_format", "TCCKPT01"}, {"frames_format", kFramesVersion}}},
          {"wall_seconds", m.wall_seconds},
          {"details", m.extra}};
}

inline fs::path write_manifest(const fs::path& out_dir, const RunManifest& m) {
  const fs::path p = out_dir / ("manifest_" + m.command + ".json");
  write_atomic(p, manifest_json(m).dump(2) + "\n");
  return p;
}

// ---------------------------------------------------------------------------
// Shared context

struct CommandContext {
  RunConfig config;
  fs::path out_dir;
  std::ostream* log = &std::cerr;
};

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

inline std::vector<RawTrajectory> read_adapter(const DataConfig& d, const fs::path& path, IngestStats& stats) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open input " + path.string());
  if (d.adapter == "porto") return parse_porto(in, stats);
  if (d.adapter == "grab") return parse_grab(in, stats, d.grab_filter);
  return parse_canonical(in, stats);
}

inline GridSpec spec_for(const RunConfig& c, const std::vector<RawTrajectory>& raw) {
  if (c.grid.bbox) return build_grid_spec(*c.grid.bbox, c.grid.n_o, c.grid.n_a);
  std::vector<GeoPoint> pts;
  for (const auto& t : raw)
    for (const auto& p : t.points) pts.push_back(p.point);
  return build_grid_spec(extrema_bbox(pts), c.grid.n_o, c.grid.n_a);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// synth

struct SynthSummary {
  fs::path csv;
  std::size_t vehicles = 0;
  std::size_t rows = 0;
};

inline SynthSummary cmd_synth(const CommandContext& ctx) {
  const RunConfig& c = ctx.config;
  validate(c);
  if (!c.grid.bbox) throw ConfigError("synth needs an explicit grid.bbox");
  detail::Stopwatch sw;
  const GridSpec spec = build_grid_spec(*c.grid.bbox, c.grid.n_o, c.grid.n_a);
  SynthParams p;
  p.n_vehicles = c.synth.n_vehicles;
  p.steps = c.synth.steps;
  p.locality_bias = c.synth.locality_bias;
  p.start_time = c.synth.start_time;
  p.seed = c.seed;
  const auto trajs = synth_generate(spec, p);

  ensure_dir(ctx.out_dir);
  SynthSummary s;
  s.csv = ctx.out_dir / "trajectories.csv";
  std::ostringstream os;
  write_canonical(os, trajs);
  write_atomic(s.csv, os.str());
  s.vehicles = trajs.size();
  for (const auto& t : trajs) s.rows += t.points.size();

  RunManifest m{"synth", run_config_to_json(c), {}, {s.csv}, sw.seconds(), {{"vehicles", s.vehicles}, {"rows", s.rows}}};
  write_manifest(ctx.out_dir, m);
  *ctx.log << "synth: " << s.vehicles << " vehicles, " << s.rows << " rows -> " << s.csv.string() << '\n';
  return s;
}

// ---------------------------------------------------------------------------
// ingest

struct IngestSummary {
  fs::path frames;
  GridSpec grid_spec;
  std::size_t raw_trajectories = 0;
  std::size_t grid_trajectories = 0;
  std::size_t frame_count = 0;
  IngestStats stats;
};

inline nlohmann::json to_json(const IngestSummary& s) {
  return {{"frames_path", s.frames.string()},
          {"grid_spec", grid_spec_to_json(s.grid_spec)},
          {"raw_trajectories", s.raw_trajectories},
          {"grid_trajectories", s.grid_trajectories},
          {"frame_count", s.frame_count},
          {"records", s.stats.records},
          {"skipped_records", s.stats.skipped_records},
          {"skipped_points", s.stats.skipped_points},
          {"filtered_records", s.stats.filtered_records},
          {"dropped_out_of_bounds_points", s.stats.dropped_out_of_bounds_points},
          {"dropped_trips", s.stats.dropped_trips},
          {"warnings", s.stats.warnings}};
}

inline IngestSummary cmd_ingest(const CommandContext& ctx) {
  const RunConfig& c = ctx.config;
  validate(c);
  if (c.data.paths.empty()) throw ConfigError("ingest needs at least one input path (data.paths)");
  detail::Stopwatch sw;
  IngestSummary s;
  std::vector<RawTrajectory> raw;
  for (const auto& p : c.data.paths) {
    auto part = detail::read_adapter(c.data, p, s.stats);
    raw.insert(raw.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  if (raw.empty()) throw DataError("input contains no usable trajectories");
  if (const auto period = c.data.effective_resample_period(); period > 0) {
    for (auto& t : raw) t = resample(t, period);
  }
  s.raw_trajectories = raw.size();
  s.grid_spec = detail::spec_for(c, raw);

  std::vector<GridTrajectory> grid;
  for (const auto& t : raw) {
    if (auto g = to_grid_trajectory(t, s.grid_spec, c.data.oob_policy, &s.stats)) grid.push_back(std::move(*g));
  }
  s.grid_trajectories = grid.size();
  const FrameSet frames = build_frame_set(grid, s.grid_spec, c.window_length());
  s.frame_count = frames.size();
  if (frames.empty()) {
    throw DataError("no frames: every trajectory has at most L=" + std::to_string(c.window_length()) + " points");
  }

  ensure_dir(ctx.out_dir);
  s.frames = ctx.out_dir / "frames.bin";
  save_frame_set(frames, s.frames);
  const fs::path summary = ctx.out_dir / "ingest_summary.json";
  write_atomic(summary, to_json(s).dump(2) + "\n");

  std::vector<fs::path> inputs(c.data.paths.begin(), c.data.paths.end());
  RunManifest m{"ingest", run_config_to_json(c), inputs, {s.frames, sidecar_path(s.frames), summary}, sw.seconds(), {}};
  write_manifest(ctx.out_dir, m);
  *ctx.log << "ingest: " << s.grid_trajectories << " trajectories, " << s.frame_count << " frames -> "
           << s.frames.string() << '\n';
  return s;
}

// ---------------------------------------------------------------------------
// train

inline std::string train_report_csv(const TrainReport& r) {
  std::ostringstream os;
  os << "epoch,train_loss,train_accuracy,validation_accuracy,best\n";
  for (std::size_t e = 0; e < r.epochs(); ++e) {
    os << e + 1 << ',' << csv::format_double(r.train_loss[e]) << ',' << csv::format_double(r.train_accuracy[e]) << ','
       << csv::format_double(r.validation_accuracy[e]) << ',' << (e + 1 == r.best_epoch ? 1 : 0) << '\n';
  }
  return os.str();
}

inline std::string checkpoint_bytes(const ModelCheckpoint& m) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, to_checkpoint(m));
  return os.str();
}

struct TrainSummary {
  fs::path checkpoint;
  fs::path report;
  TrainReport train_report;
  double test_accuracy = 0.0;
};

/// RunConfig with the model G and L taken from the frames. The grid n_o and
/// n_a must still multiply to the frame G.
inline ModelConfig model_for(const RunConfig& c, const FrameSet& frames) {
  if (frames.grid_spec.grid_count() != c.grid_count()) {
    throw ConfigError("frames have G=" + std::to_string(frames.grid_spec.grid_count()) + " but the config grid has " +
                      std::to_string(c.grid_count()) + " cells");
  }
  ModelConfig m = c.model;
  check_compatible(m, frames, "input");
  return m;
}

inline TrainSummary cmd_train(const CommandContext& ctx, const fs::path& frames_path) {
  const RunConfig& c = ctx.config;
  validate(c);
  detail::Stopwatch sw;
  const FrameSet frames = load_frame_set(frames_path);
  const ModelConfig mc = model_for(c, frames);
  const DatasetSplit parts = split(frames, c.split);
  *ctx.log << "train: " << parts.train.size() << " train, " << parts.validation.size() << " validation, "
           << parts.test.size() << " test frames\n";

  std::ostream& log = *ctx.log;
  TrainResult res = train(parts, mc, [&log](std::size_t epoch, const TrainReport& r) {
    log << "epoch " << epoch << " loss " << fixed2(r.train_loss.back()) << " train " << fixed2(r.train_accuracy.back())
        << "% val " << fixed2(r.validation_accuracy.back()) << "%\n";
  });

  ensure_dir(ctx.out_dir);
  TrainSummary s;
  s.checkpoint = ctx.out_dir / "model.ckpt";
  s.report = ctx.out_dir / "train_report.csv";
  write_atomic(s.checkpoint, checkpoint_bytes({mc, frames.grid_spec, c.split, res.params}));
  write_atomic(s.report, train_report_csv(res.report));
  const Predictor pred(res.params, mc);
  s.test_accuracy = accuracy(predict_all(parts.test, pred)).percent;
  s.train_report = std::move(res.report);

  RunManifest m{"train",
                run_config_to_json(c),
                {frames_path},
                {s.checkpoint, s.report},
                sw.seconds(),
                {{"best_epoch", s.train_report.best_epoch},
                 {"stopping_epoch", s.train_report.stopping_epoch},
                 {"adam_steps", s.train_report.adam_steps},
                 {"test_accuracy", s.test_accuracy},
                 {"train_wall_seconds", s.train_report.wall_seconds}}};
  write_manifest(ctx.out_dir, m);
  log << "train: best epoch " << s.train_report.best_epoch << ", test accuracy " << fixed2(s.test_accuracy) << "%\n";
  return s;
}

// ---------------------------------------------------------------------------
// evaluate

/// Either a trained checkpoint or the persistence baseline.
struct PredictorSource {
  std::optional<fs::path> checkpoint;  // nullopt: persistence

  std::string name() const { return checkpoint ? "capsnet" : "persistence"; }
};

struct LoadedPredictor {
  FramePredictor predict;
  std::optional<ModelCheckpoint> model;
};

inline LoadedPredictor load_predictor(const PredictorSource& src, const FrameSet& frames) {
  LoadedPredictor out;
  if (!src.checkpoint) {
    out.predict = persistence_baseline;
    return out;
  }
  out.model = from_checkpoint(load_checkpoint(*src.checkpoint));
  check_compatible(out.model->config, frames, "evaluation");
  auto p = std::make_shared<Predictor>(out.model->params, out.model->config);
  out.predict = [p](const TrajectoryFrame& f) { return (*p)(f); };
  return out;
}

/// Picks all frames or one partition. The split comes from the checkpoint
/// when there is one, otherwise from the run config.
inline FrameSet select_subset(const FrameSet& frames, const std::string& subset, const SplitPolicy& policy) {
  if (subset == "all") return frames;
  if (subset != "train" && subset != "validation" && subset != "test") {
    throw ConfigError("subset must be all, train, validation or test; got '" + subset + "'");
  }
  DatasetSplit parts = split(frames, policy);
  if (subset == "train") return std::move(parts.train);
  if (subset == "validation") return std::move(parts.validation);
  return std::move(parts.test);
}

struct BaselineRow {
  std::uint32_t window_length = 0;
  std::string name;
  double baseline_accuracy = 0.0;
  std::optional<double> proposed_accuracy;
};

/// CSV with header `L,baseline,baseline_accuracy[,proposed_accuracy]`.
inline std::vector<BaselineRow> read_baseline_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open baseline file " + p.string());
  std::vector<std::string> row;
  if (!csv::read_record(in, row)) throw DataError("baseline file is empty");
  const auto idx = detail::header_index(row);
  const auto c_l = detail::require_column(idx, {"l"}, "baseline file");
  const auto c_name = detail::require_column(idx, {"baseline", "model"}, "baseline file");
  const auto c_acc = detail::require_column(idx, {"baseline_accuracy", "accuracy"}, "baseline file");
  const auto c_prop = detail::find_column(idx, {"proposed_accuracy", "proposed"});
  std::vector<BaselineRow> out;
  std::size_t line = 1;
  while (csv::read_record(in, row)) {
    ++line;
    if (row.size() == 1 && csv::trim(row[0]).empty()) continue;
    auto field = [&](std::size_t i) -> std::string {
      if (i >= row.size()) throw DataError("baseline file line " + std::to_string(line) + " is short");
      return std::string(csv::trim(row[i]));
    };
    BaselineRow b;
    const auto l = csv::parse_int(field(c_l));
    const auto acc = csv::parse_double(field(c_acc));
    if (!l || *l < 1 || !acc) throw DataError("baseline file line " + std::to_string(line) + " is malformed");
    b.window_length = static_cast<std::uint32_t>(*l);
    b.name = field(c_name);
    b.baseline_accuracy = *acc;
    if (c_prop && *c_prop < row.size() && !csv::trim(row[*c_prop]).empty()) {
      const auto prop = csv::parse_double(field(*c_prop));
      if (!prop) throw DataError("baseline file line " + std::to_string(line) + " has a malformed proposed accuracy");
      b.proposed_accuracy = *prop;
    }
    out.push_back(std::move(b));
  }
  return out;
}

struct ImaRow {
  std::uint32_t window_length = 0;
  std::string baseline;
  double baseline_accuracy = 0.0;
  double proposed_accuracy = 0.0;
  double ima = 0.0;
};

/// Rows without a proposed accuracy use the measured one when their L
/// matches the evaluated frames; other such rows are left out.
inline std::vector<ImaRow> ima_table(const std::vector<BaselineRow>& rows, std::uint32_t measured_l,
                                     double measured_accuracy) {
  std::vector<ImaRow> out;
  for (const auto& r : rows) {
    double proposed;
    if (r.proposed_accuracy) {
      proposed = *r.proposed_accuracy;
    } else if (r.window_length == measured_l) {
      proposed = measured_accuracy;
    } else {
      continue;
    }
    out.push_back({r.window_length, r.name, r.baseline_accuracy, proposed, ima(proposed, r.baseline_accuracy)});
  }
  return out;
}

inline std::string ima_csv(const std::vector<ImaRow>& rows) {
  std::ostringstream os;
  os << "L,baseline,baseline_accuracy,proposed_accuracy,ima\n";
  for (const auto& r : rows) {
    os << r.window_length << ',' << csv::quote_if_needed(r.baseline) << ',' << fixed2(r.baseline_accuracy) << ','
       << fixed2(r.proposed_accuracy) << ',' << fixed2(r.ima) << '\n';
  }
  return os.str();
}

struct EvaluateOptions {
  PredictorSource source;
  std::string subset = "all";
  std::optional<fs::path> baseline_file;
};

struct EvaluateSummary {
  AccuracyReport report;
  std::vector<ImaRow> ima;
  fs::path json;
};

inline EvaluateSummary cmd_evaluate(const CommandContext& ctx, const fs::path& frames_path, const EvaluateOptions& opt) {
  const RunConfig& c = ctx.config;
  validate(c);
  detail::Stopwatch sw;
  const FrameSet frames = load_frame_set(frames_path);
  const LoadedPredictor lp = load_predictor(opt.source, frames);
  const SplitPolicy policy = lp.model ? lp.model->split_policy : c.split;
  const FrameSet chosen = select_subset(frames, opt.subset, policy);
  std::vector<BaselineRow> baselines;
  if (opt.baseline_file) baselines = read_baseline_file(*opt.baseline_file);

  EvaluateSummary s;
  s.report = accuracy(predict_all(chosen, lp.predict));
  s.ima = ima_table(baselines, frames.window_length, s.report.percent);

  ensure_dir(ctx.out_dir);
  s.json = ctx.out_dir / "accuracy.json";
  const fs::path csv_path = ctx.out_dir / "accuracy.csv";
  nlohmann::json j = {{"predictor", opt.source.name()},
                      {"subset", opt.subset},
                      {"G", frames.grid_spec.grid_count()},
                      {"L", frames.window_length},
                      {"samples", s.report.samples},
                      {"correct", s.report.correct},
                      {"accuracy", s.report.percent}};
  write_atomic(s.json, j.dump(2) + "\n");
  std::ostringstream os;
  os << "predictor,subset,L,samples,correct,accuracy\n"
     << opt.source.name() << ',' << opt.subset << ',' << frames.window_length << ',' << s.report.samples << ','
     << s.report.correct << ',' << fixed2(s.report.percent) << '\n';
  write_atomic(csv_path, os.str());
  std::vector<fs::path> artifacts = {s.json, csv_path};
  if (opt.baseline_file) {
    const fs::path ima_path = ctx.out_dir / "ima.csv";
    write_atomic(ima_path, ima_csv(s.ima));
    artifacts.push_back(ima_path);
  }

  std::vector<fs::path> inputs = {frames_path};
  if (opt.source.checkpoint) inputs.push_back(*opt.source.checkpoint);
  if (opt.baseline_file) inputs.push_back(*opt.baseline_file);
  write_manifest(ctx.out_dir, {"evaluate", run_config_to_json(c), inputs, artifacts, sw.seconds(), j});
  *ctx.log << "evaluate: P = " << fixed2(s.report.percent) << "% over " << s.report.samples << " frames\n";
  for (const auto& r : s.ima) {
    *ctx.log << "  L=" << r.window_length << ' ' << r.baseline << ' ' << fixed2(r.baseline_accuracy) << " vs "
             << fixed2(r.proposed_accuracy) << " IMA " << fixed2(r.ima) << '\n';
  }
  return s;
}

// ---------------------------------------------------------------------------
// distribution

struct DistributionOptions {
  PredictorSource source;
  std::string subset = "all";
  std::int64_t bucket_seconds = 300;
  std::optional<std::int64_t> origin;
};

struct DistributionSummary {
  std::vector<BucketForecast> buckets;
  fs::path csv;
};

inline std::string distribution_csv(const std::vector<BucketForecast>& buckets, std::uint32_t g) {
  std::ostringstream os;
  os << "bucket,start_time,vehicles";
  for (std::uint32_t i = 1; i <= g; ++i) os << ",pred_" << i;
  for (std::uint32_t i = 1; i <= g; ++i) os << ",actual_" << i;
  os << '\n';
  for (const auto& b : buckets) {
    os << b.bucket << ',' << b.start << ',' << b.predicted.vehicles;
    for (auto n : b.predicted.counts) os << ',' << n;
    for (auto n : b.actual.counts) os << ',' << n;
    os << '\n';
  }
  return os.str();
}

inline std::string error_ratio_csv(const std::vector<BucketForecast>& buckets, std::uint32_t g) {
  std::ostringstream os;
  os << "bucket,start_time";
  for (std::uint32_t i = 1; i <= g; ++i) os << ",err_" << i;
  os << '\n';
  for (const auto& b : buckets) {
    os << b.bucket << ',' << b.start;
    for (const auto& r : error_ratio(b.predicted, b.actual).ratios) {
      os << ',';
      if (r) os << csv::format_double(*r);
    }
    os << '\n';
  }
  return os.str();
}

inline DistributionSummary cmd_distribution(const CommandContext& ctx, const fs::path& frames_path,
                                            const DistributionOptions& opt) {
  const RunConfig& c = ctx.config;
  validate(c);
  if (opt.bucket_seconds <= 0) throw ConfigError("bucket width must be positive");
  detail::Stopwatch sw;
  const FrameSet frames = load_frame_set(frames_path);
  const LoadedPredictor lp = load_predictor(opt.source, frames);
  const SplitPolicy policy = lp.model ? lp.model->split_policy : c.split;
  const FrameSet chosen = select_subset(frames, opt.subset, policy);
  const std::uint32_t g = frames.grid_spec.grid_count();

  DistributionSummary s;
  s.buckets = rolling_evaluation(chosen, lp.predict, opt.bucket_seconds, opt.origin);

  ensure_dir(ctx.out_dir);
  s.csv = ctx.out_dir / "distribution.csv";
  const fs::path json_path = ctx.out_dir / "distribution.json";
  const fs::path err_path = ctx.out_dir / "error_ratio.csv";
  write_atomic(s.csv, distribution_csv(s.buckets, g));
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& b : s.buckets) {
    nlohmann::json ratios = nlohmann::json::array();
    for (const auto& r : error_ratio(b.predicted, b.actual).ratios) ratios.push_back(r ? nlohmann::json(*r) : nullptr);
    rows.push_back({{"bucket", b.bucket},
                    {"start_time", b.start},
                    {"vehicles", b.predicted.vehicles},
                    {"predicted", b.predicted.counts},
                    {"actual", b.actual.counts},
                    {"error_ratio", ratios}});
  }
  const nlohmann::json j = {{"predictor", opt.source.name()},
                            {"subset", opt.subset},
                            {"G", g},
                            {"bucket_seconds", opt.bucket_seconds},
                            {"buckets", rows}};
  write_atomic(json_path, j.dump(2) + "\n");
  write_atomic(err_path, error_ratio_csv(s.buckets, g));

  std::vector<fs::path> inputs = {frames_path};
  if (opt.source.checkpoint) inputs.push_back(*opt.source.checkpoint);
  write_manifest(ctx.out_dir, {"distribution", run_config_to_json(c), inputs, {s.csv, json_path, err_path},
                               sw.seconds(), {{"buckets", s.buckets.size()}}});
  *ctx.log << "distribution: " << s.buckets.size() << " buckets -> " << s.csv.string() << '\n';
  return s;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepRow {
  std::size_t filters = 0;
  std::size_t capsule_dim = 0;
  bool trained = false;
  double validation_accuracy = 0.0;  // best epoch
  std::size_t best_epoch = 0;
  std::size_t stopping_epoch = 0;
  std::string note;
};

struct SweepSummary {
  std::vector<SweepRow> ranked;  // trained rows by validation accuracy, then skipped rows
  fs::path csv;
};

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "rank,filters,capsule_dim,status,validation_accuracy,best_epoch,stopping_epoch,note\n";
  std::size_t rank = 0;
  for (const auto& r : rows) {
    if (r.trained) {
      os << ++rank << ',' << r.filters << ',' << r.capsule_dim << ",trained," << csv::format_double(r.validation_accuracy)
         << ',' << r.best_epoch << ',' << r.stopping_epoch << ",\n";
    } else {
      os << ',' << r.filters << ',' << r.capsule_dim << ",skipped,,,," << csv::quote_if_needed(r.note) << '\n';
    }
  }
  return os.str();
}

inline SweepSummary cmd_sweep(const CommandContext& ctx, const fs::path& frames_path,
                              const std::vector<std::size_t>& filters, const std::vector<std::size_t>& dims) {
  const RunConfig& c = ctx.config;
  validate(c);
  if (filters.empty() || dims.empty()) throw ConfigError("sweep needs at least one filter count and capsule dim");
  detail::Stopwatch sw;
  const FrameSet frames = load_frame_set(frames_path);
  const ModelConfig base = model_for(c, frames);
  const DatasetSplit parts = split(frames, c.split);

  std::vector<SweepRow> rows;
  for (auto m : filters) {
    for (auto d : dims) {
      SweepRow r;
      r.filters = m;
      r.capsule_dim = d;
      ModelConfig mc = base;
      mc.filters = m;
      mc.capsule_dim = d;
      try {
        validate(mc);
      } catch (const ConfigError& e) {
        r.note = e.what();
        *ctx.log << "sweep: skip M=" << m << " D=" << d << ": " << r.note << '\n';
        rows.push_back(std::move(r));
        continue;
      }
      const TrainResult res = train(parts, mc);
      r.trained = true;
      r.best_epoch = res.report.best_epoch;
      r.stopping_epoch = res.report.stopping_epoch;
      r.validation_accuracy = res.report.validation_accuracy.at(r.best_epoch - 1);
      *ctx.log << "sweep: M=" << m << " D=" << d << " validation " << fixed2(r.validation_accuracy) << "%\n";
      rows.push_back(std::move(r));
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    if (a.trained != b.trained) return a.trained;
    if (a.trained && a.validation_accuracy != b.validation_accuracy) return a.validation_accuracy > b.validation_accuracy;
    return std::tie(a.filters, a.capsule_dim) < std::tie(b.filters, b.capsule_dim);
  });

  ensure_dir(ctx.out_dir);
  SweepSummary s;
  s.csv = ctx.out_dir / "sweep.csv";
  write_atomic(s.csv, sweep_csv(rows));
  s.ranked = std::move(rows);
  write_manifest(ctx.out_dir, {"sweep", run_config_to_json(c), {frames_path}, {s.csv}, sw.seconds(),
                               {{"filters", filters}, {"capsule_dims", dims}}});
  return s;
}

}  // namespace trajcaps
