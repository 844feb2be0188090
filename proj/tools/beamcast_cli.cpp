// beamcast: data generation, staged training, evaluation, benchmarking,
// ablations and sweeps from one config file.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "beamcast/channel_sim.hpp"
#include "beamcast/common.hpp"
#include "beamcast/dataset.hpp"
#include "beamcast/eval_harness.hpp"
#include "beamcast/metrics.hpp"
#include "beamcast/params.hpp"
#include "beamcast/run_config.hpp"
#include "beamcast/training.hpp"

using namespace beamcast;
namespace fs = std::filesystem;

namespace {

enum ExitCode {
  kOk = 0,
  kUnexpected = 1,
  kConfig = 2,
  kMissing = 3,
  kNumerical = 4,
  kData = 5,
};

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  int threads = 0;
};

RunConfig resolve(const Globals& g) {
  RunConfig c = g.config_path.empty() ? RunConfig{} : load_run_config(g.config_path);
  std::vector<std::string> ov = g.overrides;
  if (g.threads > 0) ov.push_back("threads=" + std::to_string(g.threads));
  apply_overrides(c, ov);
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
  if (!out) throw ConfigError("write failed for " + path.string());
}

DatasetContainer load_split(const RunConfig& c, const std::string& name) {
  const auto p = c.split_path(name);
  if (!fs::exists(p))
    throw MissingArtifactError("dataset split " + p.string() + " not found (run gen-data first)");
  return read_dataset(p);
}

DatasetSplit load_splits(const RunConfig& c) {
  return {load_split(c, "train"), load_split(c, "val"), load_split(c, "test")};
}

ParamSet<float> load_checked(const fs::path& path, const ModelConfig& config,
                             std::optional<StageMetadata>* stage = nullptr) {
  if (!fs::exists(path)) throw MissingArtifactError("checkpoint " + path.string() + " not found");
  const auto wf = read_weight_file(path);
  if (wf.fingerprint != config.fingerprint())
    throw ConfigError("checkpoint " + path.string() + " was written for a different model: file " +
                      hex64(wf.fingerprint) + " vs config " + hex64(config.fingerprint()));
  return load_params(path, config, stage);
}

// ---- subcommands -------------------------------------------------------------

int cmd_gen_data(const RunConfig& c) {
  SimConfig sim = c.sim;
  sim.rng_seed = c.sim_seed();
  std::cerr << "generating " << c.num_sequences << " sequences\n";
  const auto seqs = generate_sequences(sim, c.num_sequences, c.threads);
  DatasetOptions opt = c.dataset;
  opt.threads = c.threads;
  const auto all = assemble_dataset(seqs, sim, c.sounding, opt);
  const auto split = split_dataset(all, c.split_seed());
  fs::create_directories(c.data_dir);
  write_dataset(split.train, c.split_path("train"));
  write_dataset(split.val, c.split_path("val"));
  write_dataset(split.test, c.split_path("test"));

  std::ostringstream stats;
  stats << "# dataset statistics\n";
  stats << "sequences_requested=" << c.num_sequences << "\n";
  stats << "records_kept=" << all.records.size() << "\n";
  auto section = [&](const std::string& name, const DatasetContainer& ds) {
    std::istringstream lines(format_stats(compute_stats(ds)));
    std::string line;
    while (std::getline(lines, line))
      if (!line.empty()) stats << name << "." << line << "\n";
  };
  section("all", all);
  section("train", split.train);
  section("val", split.val);
  section("test", split.test);
  write_text(c.data_dir / "stats.txt", stats.str());
  std::cout << "train=" << split.train.records.size() << " val=" << split.val.records.size()
            << " test=" << split.test.records.size() << " classes=" << all.num_classes << "\n";
  return kOk;
}

int cmd_train(const RunConfig& c, const std::string& regime, int stage) {
  const auto data = load_splits(c);
  const auto exp = c.experiment(data.train);
  const auto dir = c.output_dir / regime;
  fs::create_directories(dir);
  TrainOptions to = exp.train;
  to.log = dir / "train.log";
  to.progress = &std::cerr;

  CurriculumResult result;
  if (regime == "three_stage") {
    CurriculumOptions co;
    co.checkpoint_dir = dir;
    co.train = to;
    if (stage) co.first_stage = co.last_stage = stage;
    if (co.first_stage == 1) fs::remove(to.log);
    auto init = init_params<float>(exp.model, exp.seed);
    result = run_curriculum(exp.model, std::move(init), data.train, data.val, exp.plans, co);
  } else if (regime == "end_to_end") {
    if (stage) throw ConfigError("--stage only applies to the three_stage regime");
    fs::remove(to.log);
    to.checkpoint = stage_checkpoint(dir, StageId::EndToEnd);
    auto init = init_params<float>(exp.model, exp.seed);
    result = run_end_to_end(exp.model, std::move(init), data.train, data.val, exp.end_to_end, to);
  } else {
    throw ConfigError("unknown regime '" + regime + "' (expected three_stage or end_to_end)");
  }
  std::string text;
  for (const auto& r : result.reports) text += format_train_report(r, to_string(r.stage) + ".");
  const auto report_path =
      dir / (stage ? "report_stage" + std::to_string(stage) + ".txt" : std::string("report.txt"));
  write_text(report_path, text);
  std::cout << text;
  return kOk;
}

ModelConfig model_for_variant(const RunConfig& c, const DatasetContainer& ds,
                              const std::string& variant) {
  if (variant == "frame_cnn") {
    ModelConfig m = c.model_for(ds);
    m.arch = Architecture::FrameCnn;
    m.moe_layers.clear();
    return m;
  }
  return variant_config(c.model_for(ds), parse_variant(variant));
}

int cmd_eval(const RunConfig& c, const fs::path& checkpoint, const std::string& variant,
             const std::string& mode_override, const fs::path& out_dir) {
  const auto data = load_splits(c);
  const auto config = model_for_variant(c, data.test, variant);
  std::optional<StageMetadata> stage;
  const auto params = load_checked(checkpoint, config, &stage);
  RoutingMode mode = RoutingMode::Top1;
  if (stage && stage->stage_id == static_cast<std::uint32_t>(StageId::EndToEnd))
    mode = RoutingMode::SoftDense;

  Table table;
  table.columns = metrics_columns();
  table.columns.insert(table.columns.begin() + 1, "mode");
  std::ostringstream report;
  // gate diagnostics are computed on the validation split
  auto add = [&](RoutingMode m, const std::string& tag, const std::string& gate_tag) {
    auto r = evaluate_params(variant, config, params, m, data);
    auto row = metrics_row(variant, r.metrics);
    row.insert(row.begin() + 1, to_string(m));
    table.rows.push_back(std::move(row));
    report << "# routing " << to_string(m) << "\n";
    report << format_report(r.metrics, tag + ".");
    if (r.heatmap) {
      report << format_gate_report(*r.heatmap, *r.collapse, gate_tag + ".");
      write_text(out_dir / "heatmap.csv", format_heatmap_csv(*r.heatmap));
    }
  };
  add(mode, "test", "val");
  if (!mode_override.empty()) {
    const RoutingMode o = parse_routing_mode(mode_override);
    if (o != mode) add(o, "test_" + to_string(o), "val_" + to_string(o));
  }
  write_text(out_dir / "eval_report.txt", report.str());
  write_text(out_dir / "eval_table.csv", format_table(table));
  std::cout << report.str();
  return kOk;
}

int cmd_bench(const RunConfig& c, const fs::path& checkpoint, const std::string& variant,
              int runs, const fs::path& out_dir) {
  const auto test = load_split(c, "test");
  const auto config = model_for_variant(c, test, variant);
  const auto params = load_checked(checkpoint, config);
  const Model<float> model(config, params);
  const auto input = sample_input(test.records.front());
  std::string text;
  for (RoutingMode m : {RoutingMode::Top1, RoutingMode::SoftDense}) {
    const auto r = bench_latency(model, input, m, 20, runs);
    if (r.jitter_warning)
      std::cerr << "warning: " << to_string(m)
                << " timings are noisy (p99 - median > 3 IQR); is the machine loaded?\n";
    text += format_latency(r, to_string(m) + ".");
  }
  write_text(out_dir / "bench_report.txt", text);
  std::cout << text;
  return kOk;
}

int cmd_ablate(const RunConfig& c, const std::vector<std::string>& variants) {
  const auto data = load_splits(c);
  auto exp = c.experiment(data.train);
  exp.work_dir = c.output_dir / "ablate";
  exp.train.progress = &std::cerr;
  Table table;
  table.columns = metrics_columns();
  table.columns.insert(table.columns.end(), {"gate_spread", "collapse_verdict"});
  std::ostringstream report;
  std::vector<std::string> names = variants;
  if (names.empty() || (names.size() == 1 && names[0] == "all"))
    for (Variant v : kAllVariants) names.push_back(to_string(v));
  std::erase(names, "all");
  for (const auto& n : names) {
    const auto r = run_ablation(parse_variant(n), exp, data);
    auto row = metrics_row(n, r.metrics);
    row.push_back(r.collapse ? format_number(r.collapse->spread) : "undefined");
    row.push_back(r.collapse ? r.collapse->verdict : "undefined");
    table.rows.push_back(std::move(row));
    report << format_report(r.metrics, n + ".");
    if (r.heatmap) {
      report << format_gate_report(*r.heatmap, *r.collapse, n + ".val.");
      write_text(exp.work_dir / n / "heatmap.csv", format_heatmap_csv(*r.heatmap));
    }
  }
  write_text(exp.work_dir / "ablation_report.txt", report.str());
  write_text(exp.work_dir / "ablation_table.csv", format_table(table));
  std::cout << format_table(table);
  return kOk;
}

int cmd_sweep(const RunConfig& c, const std::string& axis_name, const std::vector<int>& values,
              int runs) {
  const auto axis = parse_sweep_axis(axis_name);
  const auto data = load_splits(c);
  auto exp = c.experiment(data.train);
  exp.work_dir = c.output_dir / ("sweep_" + to_string(axis));
  exp.train.progress = &std::cerr;
  const auto points = run_sweep(axis, values, exp, data, runs);
  Table table;
  table.columns = metrics_columns();
  table.columns.insert(table.columns.begin() + 1, "value");
  table.columns.insert(table.columns.end(), {"mean_ms", "p99_ms"});
  std::ostringstream report;
  for (const auto& p : points) {
    const std::string tag = to_string(axis) + "_" + std::to_string(p.value);
    auto row = metrics_row(tag, p.result.metrics);
    row.insert(row.begin() + 1, std::to_string(p.value));
    row.push_back(format_number(p.latency.mean_ms));
    row.push_back(format_number(p.latency.p99_ms));
    table.rows.push_back(std::move(row));
    report << format_report(p.result.metrics, tag + ".") << format_latency(p.latency, tag + ".");
  }
  write_text(exp.work_dir / "sweep_report.txt", report.str());
  write_text(exp.work_dir / "sweep_table.csv", format_table(table));
  std::cout << format_table(table);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"beamcast: scene-conditioned MoE beam prediction"};
  app.require_subcommand(0, 1);
  Globals g;
  app.add_option("-c,--config", g.config_path, "JSON run configuration");
  app.add_option("--set", g.overrides, "override a config value: dotted.path=value")
      ->take_all();
  app.add_option("--threads", g.threads, "worker threads (bit-exact results need 1)");

  auto* gen = app.add_subcommand("gen-data", "simulate, sound, label and split the dataset");

  auto* train = app.add_subcommand("train", "train a model");
  std::string regime = "three_stage";
  int stage = 0;
  train->add_option("--regime", regime, "three_stage | end_to_end");
  train->add_option("--stage", stage, "run a single curriculum stage (resumes from the previous)")
      ->check(CLI::Range(1, 3));

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  std::string checkpoint, variant = "full", mode;
  std::string out_dir;
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--variant", variant, "architecture of the checkpoint");
  eval->add_option("--mode", mode, "extra routing mode to compare against the default");
  eval->add_option("--out", out_dir, "report directory (default: next to the checkpoint)");

  auto* bench = app.add_subcommand("bench", "single-sample latency of Top1 and SoftDense");
  int runs = 1000;
  bench->add_option("--checkpoint", checkpoint)->required();
  bench->add_option("--variant", variant);
  bench->add_option("--runs", runs)->check(CLI::PositiveNumber);
  bench->add_option("--out", out_dir);

  auto* ablate = app.add_subcommand("ablate", "train and evaluate ablation variants");
  std::vector<std::string> variants;
  ablate->add_option("--variant", variants, "full no_moe no_context no_se end_to_end | all");

  auto* sweep = app.add_subcommand("sweep", "depth or MoE-layer-count sweep");
  std::string axis = "depth";
  std::vector<int> values;
  sweep->add_option("--axis", axis, "depth | moe_count");
  sweep->add_option("--values", values)->required()->delimiter(',');
  sweep->add_option("--runs", runs, "latency runs per point")->check(CLI::PositiveNumber);

  auto* print = app.add_subcommand("print-config", "print the fully resolved configuration");
  bool print_flag = false;
  app.add_flag("--print-config", print_flag, "print the resolved configuration and exit");

  CLI11_PARSE(app, argc, argv);
  if (!print_flag && app.get_subcommands().empty()) {
    std::cout << app.help();
    return kConfig;
  }

  try {
    const RunConfig c = resolve(g);
    if (print_flag || *print) {
      std::cout << dump_run_config(c);
      return kOk;
    }
    const auto out_or = [&](const std::string& dflt) {
      return out_dir.empty() ? fs::path(dflt) : fs::path(out_dir);
    };
    if (*gen) return cmd_gen_data(c);
    if (*train) return cmd_train(c, regime, stage);
    const std::string ckpt_dir = fs::path(checkpoint).parent_path().string();
    if (*eval) return cmd_eval(c, checkpoint, variant, mode, out_or(ckpt_dir));
    if (*bench) return cmd_bench(c, checkpoint, variant, runs, out_or(ckpt_dir));
    if (*ablate) return cmd_ablate(c, variants);
    return cmd_sweep(c, axis, values, runs);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return kMissing;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kNumerical;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "unexpected: " << e.what() << "\n";
    return kUnexpected;
  }
}
