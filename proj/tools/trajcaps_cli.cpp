// trajcaps: command-line front end.
//
//   trajcaps synth        --config run.json --out dir
//   trajcaps ingest       --config run.json --out dir [--adapter porto] raw.csv...
//   trajcaps train        --config run.json --frames dir/frames.bin --out dir
//   trajcaps evaluate     --frames f.bin (--checkpoint m.ckpt | --persistence) [--subset test] [--baseline b.csv]
//   trajcaps distribution --frames f.bin (--checkpoint m.ckpt | --persistence) [--bucket 300]
//   trajcaps sweep        --config run.json --frames f.bin --filters 16,32 --dims 4,8
//
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical divergence.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "trajcaps/commands.hpp"

namespace {

using namespace trajcaps;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "Run config JSON");
  cmd->add_option("--seed", c.seed, "Root seed (overrides the config)");
  cmd->add_option("--out", c.out, "Output directory (overrides output_dir)");
  cmd->add_option("--set", c.overrides, "Override a config key, e.g. model.epochs=10")->take_all();
}

CommandContext load_context(const Common& c) {
  nlohmann::json doc = nlohmann::json::object();
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw ConfigError("cannot open config " + c.config_path);
    try {
      in >> doc;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + c.config_path + " is not valid JSON: " + e.what());
    }
  }
  for (const auto& o : c.overrides) apply_override(doc, o);
  if (c.seed) doc["seed"] = *c.seed;
  if (!c.out.empty()) doc["output_dir"] = c.out;
  CommandContext ctx;
  ctx.config = run_config_from_json(doc);
  ctx.out_dir = ctx.config.output_dir;
  return ctx;
}

PredictorSource source_of(const std::string& checkpoint, bool persistence) {
  if (persistence == !checkpoint.empty()) throw ConfigError("give exactly one of --checkpoint or --persistence");
  PredictorSource s;
  if (!checkpoint.empty()) s.checkpoint = checkpoint;
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Next-location prediction on grid trajectories with a capsule network"};
  app.require_subcommand(1);

  Common common;
  std::string frames_path, checkpoint, subset = "all", baseline, adapter;
  std::vector<std::string> inputs;
  bool persistence = false;
  std::int64_t bucket = 300;
  std::optional<std::int64_t> origin;
  std::vector<std::size_t> filters, dims;

  auto* synth = app.add_subcommand("synth", "Generate seeded random-walk trajectories");
  add_common(synth, common);

  auto* ingest = app.add_subcommand("ingest", "Convert raw GPS files into trajectory frames");
  add_common(ingest, common);
  ingest->add_option("--adapter", adapter, "canonical, porto or grab");
  ingest->add_option("inputs", inputs, "Raw input files (override data.paths)");

  auto* train = app.add_subcommand("train", "Train the capsule network");
  add_common(train, common);
  train->add_option("--frames", frames_path, "Frame file from ingest")->required();

  auto* evaluate = app.add_subcommand("evaluate", "Prediction accuracy and optional IMA table");
  add_common(evaluate, common);
  evaluate->add_option("--frames", frames_path, "Frame file from ingest")->required();
  evaluate->add_option("--checkpoint", checkpoint, "Model checkpoint");
  evaluate->add_flag("--persistence", persistence, "Use the last-visited-grid baseline");
  evaluate->add_option("--subset", subset, "all, train, validation or test");
  evaluate->add_option("--baseline", baseline, "CSV: L,baseline,baseline_accuracy[,proposed_accuracy]");

  auto* distribution = app.add_subcommand("distribution", "Per-bucket predicted vs actual vehicle counts");
  add_common(distribution, common);
  distribution->add_option("--frames", frames_path, "Frame file from ingest")->required();
  distribution->add_option("--checkpoint", checkpoint, "Model checkpoint");
  distribution->add_flag("--persistence", persistence, "Use the last-visited-grid baseline");
  distribution->add_option("--subset", subset, "all, train, validation or test");
  distribution->add_option("--bucket", bucket, "Bucket width in seconds");
  distribution->add_option("--origin", origin, "Bucket origin timestamp (default: first frame)");

  auto* sweep = app.add_subcommand("sweep", "Validation accuracy over filter counts and capsule dims");
  add_common(sweep, common);
  sweep->add_option("--frames", frames_path, "Frame file from ingest")->required();
  sweep->add_option("--filters", filters, "Filter counts M")->delimiter(',')->required();
  sweep->add_option("--dims", dims, "Capsule dims D")->delimiter(',')->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (!inputs.empty()) {
      nlohmann::json paths = inputs;
      common.overrides.push_back("data.paths=" + paths.dump());
    }
    if (!adapter.empty()) common.overrides.push_back("data.adapter=\"" + adapter + "\"");
    CommandContext ctx = load_context(common);

    if (*synth) {
      cmd_synth(ctx);
    } else if (*ingest) {
      cmd_ingest(ctx);
    } else if (*train) {
      cmd_train(ctx, frames_path);
    } else if (*evaluate) {
      EvaluateOptions opt;
      opt.source = source_of(checkpoint, persistence);
      opt.subset = subset;
      if (!baseline.empty()) opt.baseline_file = baseline;
      cmd_evaluate(ctx, frames_path, opt);
    } else if (*distribution) {
      DistributionOptions opt;
      opt.source = source_of(checkpoint, persistence);
      opt.subset = subset;
      opt.bucket_seconds = bucket;
      opt.origin = origin;
      cmd_distribution(ctx, frames_path, opt);
    } else if (*sweep) {
      cmd_sweep(ctx, frames_path, filters, dims);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const OutOfBoundsError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
