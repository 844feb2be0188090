#include "beamcast/eval_harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "beamcast/common.hpp"
#include "beamcast/quadrant.hpp"

namespace beamcast {

double nearest_rank(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw UndefinedMetricError("percentile of an empty sample");
  if (!(q > 0.0 && q <= 1.0)) throw ConfigError("percentile must lie in (0, 1]");
  const auto n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(q * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

LatencyReport summarize_latency(std::vector<double> samples_ms, RoutingMode mode, int warmup) {
  if (samples_ms.empty()) throw UndefinedMetricError("no latency samples");
  LatencyReport r;
  r.mode = mode;
  r.n_warmup = warmup;
  r.n_runs = static_cast<int>(samples_ms.size());
  r.mean_ms = std::accumulate(samples_ms.begin(), samples_ms.end(), 0.0) /
              static_cast<double>(samples_ms.size());
  std::vector<double> sorted = samples_ms;
  std::sort(sorted.begin(), sorted.end());
  r.median_ms = nearest_rank(sorted, 0.5);
  r.q1_ms = nearest_rank(sorted, 0.25);
  r.q3_ms = nearest_rank(sorted, 0.75);
  r.p99_ms = nearest_rank(sorted, 0.99);
  r.jitter_warning = (r.p99_ms - r.median_ms) > 3.0 * (r.q3_ms - r.q1_ms);
  r.samples_ms = std::move(samples_ms);
  return r;
}

LatencyReport bench_latency(const Model<float>& model, const SampleInput& input, RoutingMode mode,
                            int warmup, int runs) {
  if (warmup < 0 || runs < 1) throw ConfigError("benchmark needs warmup >= 0 and runs >= 1");
  ForwardOptions<float> opt;
  opt.mode = mode;
  const std::span<const SampleInput> one(&input, 1);
  volatile float sink = 0.0f;
  for (int i = 0; i < warmup; ++i) sink = sink + model.forward(one, opt).logits(0, 0);

  using clock = std::chrono::steady_clock;
  std::vector<double> samples;
  samples.reserve(static_cast<std::size_t>(runs));
  for (int i = 0; i < runs; ++i) {
    const auto t0 = clock::now();
    const auto fc = model.forward(one, opt);
    const auto t1 = clock::now();
    sink = sink + fc.logits(0, 0);
    samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return summarize_latency(std::move(samples), mode, warmup);
}

std::string format_latency(const LatencyReport& r, const std::string& prefix) {
  std::ostringstream os;
  os << prefix << "mode=" << to_string(r.mode) << "\n";
  os << prefix << "batch_size=" << r.batch_size << "\n";
  os << prefix << "n_warmup=" << r.n_warmup << "\n";
  os << prefix << "n_runs=" << r.n_runs << "\n";
  os << prefix << "mean_ms=" << format_number(r.mean_ms) << "\n";
  os << prefix << "median_ms=" << format_number(r.median_ms) << "\n";
  os << prefix << "p99_ms=" << format_number(r.p99_ms) << "\n";
  os << prefix << "iqr_ms=" << format_number(r.q3_ms - r.q1_ms) << "\n";
  os << prefix << "jitter_warning=" << (r.jitter_warning ? 1 : 0) << "\n";
  return os.str();
}

namespace {

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

LatencyComparison compare_routing_latency(const Model<float>& model, const SampleInput& input,
                                          int repeats, int warmup, int runs) {
  if (repeats < 1) throw ConfigError("latency comparison needs at least one repeat");
  LatencyComparison c;
  for (int r = 0; r < repeats; ++r) {
    // alternate the order so slow drift hits both modes evenly
    if (r % 2 == 0) {
      c.top1_means.push_back(bench_latency(model, input, RoutingMode::Top1, warmup, runs).mean_ms);
      c.soft_means.push_back(
          bench_latency(model, input, RoutingMode::SoftDense, warmup, runs).mean_ms);
    } else {
      c.soft_means.push_back(
          bench_latency(model, input, RoutingMode::SoftDense, warmup, runs).mean_ms);
      c.top1_means.push_back(bench_latency(model, input, RoutingMode::Top1, warmup, runs).mean_ms);
    }
  }
  c.top1_median = median_of(c.top1_means);
  c.soft_median = median_of(c.soft_means);
  return c;
}

// ---- gate diagnostics ------------------------------------------------------

std::optional<double> GateHeatmap::agreement() const {
  if (total == 0) return std::nullopt;
  return static_cast<double>(agree) / static_cast<double>(total);
}

GateHeatmap heatmap_from_weights(const std::vector<std::vector<double>>& weights,
                                 std::span<const int> quadrants) {
  if (weights.size() != quadrants.size()) throw ConfigError("weights/quadrants size mismatch");
  if (weights.empty()) throw UndefinedMetricError("gate heatmap of an empty set");
  GateHeatmap h;
  h.n_experts = static_cast<int>(weights.front().size());
  for (auto& row : h.rows) row.assign(static_cast<std::size_t>(h.n_experts), 0.0);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto& w = weights[i];
    if (static_cast<int>(w.size()) != h.n_experts) throw ConfigError("ragged gate weights");
    const int q = quadrants[i];
    if (q < 0 || q > 3) throw ConfigError("quadrant out of range");
    for (int e = 0; e < h.n_experts; ++e) h.rows[q][e] += w[e];
    ++h.counts[q];
    const int top = static_cast<int>(std::max_element(w.begin(), w.end()) - w.begin());
    if (top == q) ++h.agree;
    ++h.total;
  }
  for (int q = 0; q < 4; ++q)
    if (h.counts[q])
      for (auto& v : h.rows[q]) v /= static_cast<double>(h.counts[q]);
  return h;
}

GateHeatmap gate_heatmap(const Model<float>& model, const DatasetContainer& ds) {
  if (ds.records.empty()) throw EmptyDatasetError("gate heatmap needs records");
  std::vector<std::vector<double>> weights;
  std::vector<int> quadrants;
  for (const auto& r : ds.records) {
    std::vector<double> w;
    for (float v : model.gate_forward(r.scene, r.speed_norm)) w.push_back(v);
    weights.push_back(std::move(w));
    quadrants.push_back(hard_assignment(r.scene, r.speed_norm));
  }
  return heatmap_from_weights(weights, quadrants);
}

std::string format_heatmap_csv(const GateHeatmap& h) {
  Table t;
  t.columns = {"quadrant", "count"};
  for (int e = 0; e < h.n_experts; ++e) t.columns.push_back("w" + std::to_string(e));
  for (int q = 0; q < 4; ++q) {
    std::vector<std::string> row{std::string(kQuadrantNames[q]), std::to_string(h.counts[q])};
    for (int e = 0; e < h.n_experts; ++e)
      row.push_back(h.row_defined(q) ? format_number(h.rows[q][e]) : "undefined");
    t.rows.push_back(std::move(row));
  }
  return format_table(t);
}

CollapseResult collapse_diagnostic(const GateHeatmap& h) {
  CollapseResult c;
  bool any = false;
  for (int q = 0; q < 4; ++q) {
    if (!h.row_defined(q)) continue;
    const auto [lo, hi] = std::minmax_element(h.rows[q].begin(), h.rows[q].end());
    c.spread = std::max(c.spread, *hi - *lo);
    any = true;
  }
  if (!any) throw UndefinedMetricError("collapse diagnostic needs a non-empty heatmap row");
  c.verdict = c.spread < kCollapsedBelow     ? "collapsed"
              : c.spread > kSpecializedAbove ? "specialized"
                                             : "intermediate";
  return c;
}

std::string format_gate_report(const GateHeatmap& h, const CollapseResult& c,
                               const std::string& prefix) {
  std::ostringstream os;
  const auto agree = h.agreement();
  os << prefix << "gate_agreement=" << (agree ? format_number(*agree) : "undefined") << "\n";
  os << prefix << "gate_spread=" << format_number(c.spread) << "\n";
  os << prefix << "collapse_verdict=" << c.verdict << "\n";
  return os.str();
}

// ---- experiments -----------------------------------------------------------

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoMoe: return "no_moe";
    case Variant::NoContext: return "no_context";
    case Variant::NoSe: return "no_se";
    case Variant::EndToEnd: return "end_to_end";
  }
  return "?";
}

Variant parse_variant(const std::string& text) {
  for (Variant v : kAllVariants)
    if (to_string(v) == text) return v;
  throw ConfigError("unknown variant '" + text +
                    "' (expected full, no_moe, no_context, no_se, end_to_end)");
}

ModelConfig variant_config(const ModelConfig& base, Variant v) {
  ModelConfig c = base;
  c.arch = Architecture::MoEformer;
  switch (v) {
    case Variant::Full:
    case Variant::EndToEnd: break;
    case Variant::NoMoe: c.moe_layers.clear(); break;
    case Variant::NoContext: c.use_context = false; break;
    case Variant::NoSe: c.use_se = false; break;
  }
  c.validate();
  return c;
}

RoutingMode variant_eval_mode(Variant v) {
  switch (v) {
    case Variant::Full:
    case Variant::NoSe:
    case Variant::NoMoe: return RoutingMode::Top1;
    case Variant::NoContext:
    case Variant::EndToEnd: return RoutingMode::SoftDense;
  }
  return RoutingMode::Top1;
}

namespace {

StagePlan with_frozen(StagePlan plan, const std::vector<std::string>& frozen) {
  for (const auto& f : frozen) plan.trainable.push_back("!" + f);
  return plan;
}

}  // namespace

VariantResult evaluate_params(const std::string& name, const ModelConfig& config,
                              const ParamSet<float>& params, RoutingMode mode,
                              const DatasetSplit& data) {
  VariantResult r;
  r.name = name;
  r.config = config;
  r.eval_mode = mode;
  r.params = params;
  const Model<float> model(config, r.params);
  r.metrics = compute_metrics(predict_logits(model, data.test, mode), eval_targets(data.test));
  if (config.has_gate()) {
    r.heatmap = gate_heatmap(model, data.val);
    r.collapse = collapse_diagnostic(*r.heatmap);
  }
  return r;
}

VariantResult train_and_evaluate(const std::string& name, const ModelConfig& config,
                                 bool curriculum, RoutingMode eval_mode,
                                 const ExperimentConfig& exp, const DatasetSplit& data,
                                 const std::vector<std::string>& frozen) {
  config.validate();
  const auto dir = exp.work_dir / name;
  std::filesystem::create_directories(dir);
  TrainOptions to = exp.train;
  to.log = dir / "train.log";
  std::filesystem::remove(to.log);  // reruns overwrite rather than append

  auto init = init_params<float>(config, exp.seed);
  CurriculumResult trained;
  if (curriculum && config.has_gate()) {
    CurriculumPlans plans = exp.plans;
    plans.stage1 = with_frozen(plans.stage1, frozen);
    CurriculumOptions co;
    co.checkpoint_dir = dir;
    co.train = to;
    trained = run_curriculum(config, std::move(init), data.train, data.val, plans, co);
  } else {
    const StagePlan& base =
        config.arch == Architecture::FrameCnn ? exp.baseline : exp.end_to_end;
    StagePlan plan = with_frozen(base, frozen);
    plan.stage = StageId::EndToEnd;
    to.checkpoint = stage_checkpoint(dir, StageId::EndToEnd);
    trained = run_end_to_end(config, std::move(init), data.train, data.val, plan, to);
  }
  auto r = evaluate_params(name, config, trained.params, eval_mode, data);
  r.reports = std::move(trained.reports);
  return r;
}

VariantResult run_ablation(Variant v, const ExperimentConfig& exp, const DatasetSplit& data) {
  const ModelConfig c = variant_config(exp.model, v);
  const bool curriculum = v == Variant::Full || v == Variant::NoSe;
  return train_and_evaluate(to_string(v), c, curriculum, variant_eval_mode(v), exp, data);
}

VariantResult run_frame_baseline(const ExperimentConfig& exp, const DatasetSplit& data) {
  ModelConfig c = exp.model;
  c.arch = Architecture::FrameCnn;
  c.moe_layers.clear();
  return train_and_evaluate("frame_cnn", c, false, RoutingMode::Top1, exp, data);
}

std::string to_string(SweepAxis a) { return a == SweepAxis::Depth ? "depth" : "moe_count"; }

SweepAxis parse_sweep_axis(const std::string& text) {
  if (text == "depth") return SweepAxis::Depth;
  if (text == "moe_count" || text == "moe_layer_count") return SweepAxis::MoeLayerCount;
  throw ConfigError("unknown sweep axis '" + text + "' (expected depth or moe_count)");
}

ModelConfig sweep_config(const ModelConfig& base, SweepAxis axis, int value) {
  ModelConfig c = base;
  c.arch = Architecture::MoEformer;
  c.moe_layers.clear();
  if (axis == SweepAxis::Depth) {
    if (value < 2) throw ConfigError("depth sweep values must be >= 2");
    c.n_layers = value;
    for (int l = std::max(0, value - 4); l < value; ++l) c.moe_layers.push_back(l);
  } else {
    c.n_layers = 4;
    if (value < 0 || value > c.n_layers)
      throw ConfigError("MoE layer count must lie in [0, " + std::to_string(c.n_layers) + "]");
    for (int l = c.n_layers - value; l < c.n_layers; ++l) c.moe_layers.push_back(l);
  }
  c.validate();
  return c;
}

std::vector<std::string> sweep_frozen_blocks(SweepAxis axis, int value) {
  std::vector<std::string> out;
  if (axis == SweepAxis::Depth && value >= 8)
    for (int l = 0; l < value - 4; ++l) out.push_back("blocks." + std::to_string(l) + ".*");
  return out;
}

std::vector<SweepPoint> run_sweep(SweepAxis axis, std::span<const int> values,
                                  const ExperimentConfig& exp, const DatasetSplit& data,
                                  int latency_runs) {
  if (data.test.records.empty()) throw EmptyDatasetError("sweep needs a test split");
  std::vector<SweepPoint> out;
  for (int v : values) {
    SweepPoint p;
    p.axis = axis;
    p.value = v;
    const ModelConfig c = sweep_config(exp.model, axis, v);
    const std::string name = to_string(axis) + "_" + std::to_string(v);
    const bool moe = !c.moe_layers.empty();
    p.result = train_and_evaluate(name, c, moe, RoutingMode::Top1, exp, data,
                                  sweep_frozen_blocks(axis, v));
    const Model<float> model(c, p.result.params);
    p.latency = bench_latency(model, sample_input(data.test.records.front()), RoutingMode::Top1,
                              20, latency_runs);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace beamcast
