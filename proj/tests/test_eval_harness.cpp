#include <doctest.h>

#include <filesystem>

#include "beamcast/eval_harness.hpp"
#include "test_helpers.hpp"

using namespace beamcast;
using namespace testutil;

TEST_CASE("nearest-rank percentile") {
  std::vector<double> s(100);
  for (int i = 0; i < 100; ++i) s[i] = i + 1;
  CHECK(nearest_rank(s, 0.99) == 99);
  CHECK(nearest_rank(s, 0.5) == 50);
  CHECK(nearest_rank(s, 1.0) == 100);
  CHECK(nearest_rank(s, 0.001) == 1);
  const std::vector<double> one{7.0};
  CHECK(nearest_rank(one, 0.99) == 7.0);
  const std::vector<double> five{1, 2, 3, 4, 5};
  CHECK(nearest_rank(five, 0.99) == 5);  // ceil(4.95) = 5
  CHECK(nearest_rank(five, 0.5) == 3);   // ceil(2.5) = 3
}

TEST_CASE("latency summary and jitter flag") {
  std::vector<double> flat(1000, 1.0);
  auto r = summarize_latency(flat, RoutingMode::Top1, 20);
  CHECK(r.mean_ms == 1.0);
  CHECK(r.median_ms == 1.0);
  CHECK(r.p99_ms == 1.0);
  CHECK_FALSE(r.jitter_warning);

  std::vector<double> spiky;
  for (int i = 0; i < 1000; ++i) spiky.push_back(i < 980 ? 1.0 + 0.001 * (i % 10) : 50.0);
  r = summarize_latency(spiky, RoutingMode::SoftDense, 20);
  CHECK(r.p99_ms == 50.0);
  CHECK(r.jitter_warning);
  CHECK(r.n_runs == 1000);
  CHECK(r.n_warmup == 20);
  const auto kv = parse_key_values(format_latency(r, "x."));
  CHECK(kv.at("x.batch_size") == "1");
  CHECK(kv.at("x.jitter_warning") == "1");
}

TEST_CASE("benchmark runs the requested number of timed passes") {
  const auto c = tiny_config();
  const auto P = init_params<float>(c, 1);
  Model<float> m(c, P);
  const auto ds = synthetic_dataset(c, 1, 1);
  const auto r = bench_latency(m, sample_input(ds.records[0]), RoutingMode::Top1, 3, 25);
  CHECK(r.samples_ms.size() == 25);
  for (double v : r.samples_ms) CHECK(v > 0.0);
  const auto cmp = compare_routing_latency(m, sample_input(ds.records[0]), 3, 2, 10);
  CHECK(cmp.top1_means.size() == 3);
  CHECK(cmp.soft_means.size() == 3);
  CHECK(cmp.ratio() > 0.0);
}

TEST_CASE("collapse diagnostic examples") {
  auto hm = [](std::vector<double> row) {
    std::vector<std::vector<double>> w{row};
    const std::vector<int> q{0};
    return heatmap_from_weights(w, q);
  };
  auto uni = collapse_diagnostic(hm({0.25, 0.25, 0.25, 0.25}));
  CHECK(uni.spread == 0.0);
  CHECK(uni.verdict == "collapsed");
  auto mid = collapse_diagnostic(hm({0.4, 0.3, 0.2, 0.1}));
  CHECK(mid.spread == doctest::Approx(0.3));
  CHECK(mid.verdict == "intermediate");

  std::vector<std::vector<double>> id;
  std::vector<int> q;
  for (int k = 0; k < 4; ++k) {
    std::vector<double> w(4, 0.0);
    w[k] = 1.0;
    id.push_back(w);
    q.push_back(k);
  }
  const auto h = heatmap_from_weights(id, q);
  const auto spec = collapse_diagnostic(h);
  CHECK(spec.spread == 1.0);
  CHECK(spec.verdict == "specialized");
  CHECK(h.agreement() == 1.0);

  GateHeatmap empty;
  empty.n_experts = 4;
  CHECK_THROWS_AS(collapse_diagnostic(empty), UndefinedMetricError);
  CHECK_FALSE(empty.agreement().has_value());
}

TEST_CASE("heatmap rows are quadrant means and sum to one") {
  const std::vector<std::vector<double>> w{{0.7, 0.1, 0.1, 0.1}, {0.5, 0.3, 0.1, 0.1},
                                           {0.1, 0.1, 0.2, 0.6}};
  const std::vector<int> q{0, 0, 3};
  const auto h = heatmap_from_weights(w, q);
  CHECK(h.counts == std::array<std::size_t, 4>{2, 0, 0, 1});
  CHECK(h.rows[0][0] == doctest::Approx(0.6));
  CHECK(h.rows[0][1] == doctest::Approx(0.2));
  CHECK_FALSE(h.row_defined(1));
  CHECK(h.agree == 3);
  for (int k : {0, 3}) {
    double s = 0;
    for (double v : h.rows[k]) s += v;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  const auto csv = parse_table(format_heatmap_csv(h));
  CHECK(csv.rows.size() == 4);
  CHECK(csv.rows[1][2] == "undefined");
  const auto gr = parse_key_values(format_gate_report(h, collapse_diagnostic(h), "val."));
  CHECK(gr.at("val.gate_agreement") == "1");
}

TEST_CASE("gate heatmap from a model covers every record") {
  const auto c = tiny_config();
  const auto P = init_params<float>(c, 1);
  const auto ds = synthetic_dataset(c, 40, 2);
  const auto h = gate_heatmap(Model<float>(c, P), ds);
  CHECK(h.total == 40);
  std::size_t n = 0;
  for (auto k : h.counts) n += k;
  CHECK(n == 40);
}

TEST_CASE("variant configs") {
  auto base = tiny_config();
  CHECK(variant_config(base, Variant::NoMoe).moe_layers.empty());
  CHECK_FALSE(variant_config(base, Variant::NoContext).use_context);
  CHECK_FALSE(variant_config(base, Variant::NoSe).use_se);
  CHECK(variant_config(base, Variant::EndToEnd).fingerprint() == base.fingerprint());
  CHECK(variant_eval_mode(Variant::Full) == RoutingMode::Top1);
  CHECK(variant_eval_mode(Variant::EndToEnd) == RoutingMode::SoftDense);
  for (auto v : kAllVariants) CHECK(parse_variant(to_string(v)) == v);
  CHECK_THROWS_AS(parse_variant("bogus"), ConfigError);
}

TEST_CASE("sweep configs") {
  ModelConfig base = tiny_config();
  const auto d2 = sweep_config(base, SweepAxis::Depth, 2);
  CHECK(d2.n_layers == 2);
  CHECK(d2.moe_layers == std::vector<int>{0, 1});
  const auto d8 = sweep_config(base, SweepAxis::Depth, 8);
  CHECK(d8.moe_layers == std::vector<int>{4, 5, 6, 7});
  CHECK(sweep_frozen_blocks(SweepAxis::Depth, 8) ==
        std::vector<std::string>{"blocks.0.*", "blocks.1.*", "blocks.2.*", "blocks.3.*"});
  CHECK(sweep_frozen_blocks(SweepAxis::Depth, 6).empty());
  const auto m0 = sweep_config(base, SweepAxis::MoeLayerCount, 0);
  CHECK(m0.n_layers == 4);
  CHECK(m0.moe_layers.empty());
  CHECK(parameter_count(m0) ==
        parameter_count(variant_config(sweep_config(base, SweepAxis::MoeLayerCount, 4), Variant::NoMoe)));
  CHECK(sweep_config(base, SweepAxis::MoeLayerCount, 2).moe_layers == std::vector<int>{2, 3});
  CHECK(parse_sweep_axis("depth") == SweepAxis::Depth);
  CHECK(parse_sweep_axis("moe_count") == SweepAxis::MoeLayerCount);
  CHECK_THROWS_AS(parse_sweep_axis("width"), ConfigError);
}

TEST_CASE("ablation and baseline run end to end on a toy split") {
  const auto c = tiny_config();
  DatasetSplit data{synthetic_dataset(c, 48, 1), synthetic_dataset(c, 16, 2),
                    synthetic_dataset(c, 16, 3)};
  ExperimentConfig exp;
  exp.model = c;
  for (StagePlan* p : {&exp.plans.stage1, &exp.plans.stage2, &exp.plans.stage3, &exp.end_to_end,
                       &exp.baseline}) {
    p->max_epochs = 1;
    p->batch_size = 16;
  }
  exp.work_dir = std::filesystem::temp_directory_path() / "beamcast_ablation_test";
  std::filesystem::remove_all(exp.work_dir);
  for (auto v : kAllVariants) {
    const auto r = run_ablation(v, exp, data);
    CHECK(r.name == to_string(v));
    CHECK(r.metrics.n_total == 16);
    CHECK(r.heatmap.has_value() == r.config.has_gate());
    CHECK(r.metrics.top3 >= r.metrics.top1);
  }
  CHECK(std::filesystem::exists(exp.work_dir / "full" / "stage3.bin"));
  CHECK(std::filesystem::exists(exp.work_dir / "end_to_end" / "end_to_end.bin"));
  const auto b = run_frame_baseline(exp, data);
  CHECK(b.config.arch == Architecture::FrameCnn);
  CHECK(b.metrics.n_total == 16);
  const std::vector<int> depths{2, 3};
  const auto sw = run_sweep(SweepAxis::Depth, depths, exp, data, 5);
  REQUIRE(sw.size() == 2);
  CHECK(sw[1].result.config.n_layers == 3);
  CHECK(sw[1].latency.samples_ms.size() == 5);
  std::filesystem::remove_all(exp.work_dir);
}
