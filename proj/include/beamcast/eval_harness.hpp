#pragma once

// Latency protocol, gate diagnostics, and the ablation / sweep drivers.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "beamcast/dataset.hpp"
#include "beamcast/metrics.hpp"
#include "beamcast/model.hpp"
#include "beamcast/training.hpp"

namespace beamcast {

// ---- latency ---------------------------------------------------------------

struct LatencyReport {
  RoutingMode mode = RoutingMode::Top1;
  int batch_size = 1;
  int n_warmup = 20;
  int n_runs = 1000;
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double p99_ms = 0.0;  // nearest rank: sorted[ceil(0.99 n) - 1]
  double q1_ms = 0.0;
  double q3_ms = 0.0;
  bool jitter_warning = false;  // p99 - median > 3 * IQR
  std::vector<double> samples_ms;
};

/// Nearest-rank percentile of an ascending-sorted sample, q in (0, 1].
double nearest_rank(std::span<const double> sorted, double q);

LatencyReport summarize_latency(std::vector<double> samples_ms, RoutingMode mode, int warmup);

/// Single-sample forwards: `warmup` discarded passes then `runs` timed ones.
LatencyReport bench_latency(const Model<float>& model, const SampleInput& input, RoutingMode mode,
                            int warmup = 20, int runs = 1000);

std::string format_latency(const LatencyReport& report, const std::string& prefix = "");

struct LatencyComparison {
  std::vector<double> top1_means;
  std::vector<double> soft_means;
  double top1_median = 0.0;
  double soft_median = 0.0;
  double ratio() const { return top1_median / soft_median; }
};

/// Alternates Top1 / SoftDense benchmark runs `repeats` times.
LatencyComparison compare_routing_latency(const Model<float>& model, const SampleInput& input,
                                          int repeats = 5, int warmup = 20, int runs = 1000);

// ---- gate diagnostics ------------------------------------------------------

struct GateHeatmap {
  int n_experts = 0;
  std::array<std::vector<double>, 4> rows;  // mean gate weights per quadrant
  std::array<std::size_t, 4> counts{};
  std::size_t agree = 0;  // argmax(w) == hard_assignment
  std::size_t total = 0;

  bool row_defined(int q) const { return counts[q] > 0; }
  std::optional<double> agreement() const;
};

GateHeatmap heatmap_from_weights(const std::vector<std::vector<double>>& weights,
                                 std::span<const int> quadrants);

GateHeatmap gate_heatmap(const Model<float>& model, const DatasetContainer& ds);

/// Rows "quadrant,count,w0,...,w{E-1}" with a header; empty rows are flagged.
std::string format_heatmap_csv(const GateHeatmap& heatmap);

struct CollapseResult {
  double spread = 0.0;
  std::string verdict;  // collapsed | intermediate | specialized
};

inline constexpr double kCollapsedBelow = 0.10;
inline constexpr double kSpecializedAbove = 0.50;

/// spread = max over defined quadrants of (max_i w_i - min_i w_i).
CollapseResult collapse_diagnostic(const GateHeatmap& heatmap);

std::string format_gate_report(const GateHeatmap& heatmap, const CollapseResult& collapse,
                               const std::string& prefix = "");

// ---- experiments -----------------------------------------------------------

enum class Variant { Full, NoMoe, NoContext, NoSe, EndToEnd };

std::string to_string(Variant v);
Variant parse_variant(const std::string& text);
inline constexpr std::array<Variant, 5> kAllVariants = {Variant::Full, Variant::NoMoe,
                                                        Variant::NoContext, Variant::NoSe,
                                                        Variant::EndToEnd};

ModelConfig variant_config(const ModelConfig& base, Variant v);
/// Routing mode a variant is evaluated under.
RoutingMode variant_eval_mode(Variant v);

struct ExperimentConfig {
  ModelConfig model;
  CurriculumPlans plans;
  StagePlan end_to_end = StagePlan::end_to_end();
  StagePlan baseline = StagePlan::end_to_end();  // frame-CNN regime
  std::uint64_t seed = 1;
  TrainOptions train;
  std::filesystem::path work_dir;  // checkpoints and logs go below this
};

struct VariantResult {
  std::string name;
  ModelConfig config;
  RoutingMode eval_mode = RoutingMode::Top1;
  MetricsReport metrics;  // on the test split
  std::optional<GateHeatmap> heatmap;  // validation split
  std::optional<CollapseResult> collapse;
  std::vector<TrainReport> reports;
  ParamSet<float> params;
};

/// Trains a model of `config` under the curriculum (when it has a gate and
/// `curriculum` is set) or end to end, then evaluates it.
VariantResult train_and_evaluate(const std::string& name, const ModelConfig& config,
                                 bool curriculum, RoutingMode eval_mode,
                                 const ExperimentConfig& exp, const DatasetSplit& data,
                                 const std::vector<std::string>& frozen = {});

VariantResult run_ablation(Variant v, const ExperimentConfig& exp, const DatasetSplit& data);

/// Frame-independent CNN on the last observed frame.
VariantResult run_frame_baseline(const ExperimentConfig& exp, const DatasetSplit& data);

VariantResult evaluate_params(const std::string& name, const ModelConfig& config,
                              const ParamSet<float>& params, RoutingMode mode,
                              const DatasetSplit& data);

enum class SweepAxis { Depth, MoeLayerCount };

std::string to_string(SweepAxis a);
SweepAxis parse_sweep_axis(const std::string& text);

/// depth: the last min(4, depth) blocks are MoE; blocks before depth-4 are
/// frozen when depth >= 8. moe count: 4-block backbone, last n blocks MoE.
ModelConfig sweep_config(const ModelConfig& base, SweepAxis axis, int value);
std::vector<std::string> sweep_frozen_blocks(SweepAxis axis, int value);

struct SweepPoint {
  SweepAxis axis = SweepAxis::Depth;
  int value = 0;
  VariantResult result;
  LatencyReport latency;
};

std::vector<SweepPoint> run_sweep(SweepAxis axis, std::span<const int> values,
                                  const ExperimentConfig& exp, const DatasetSplit& data,
                                  int latency_runs = 1000);

}  // namespace beamcast
