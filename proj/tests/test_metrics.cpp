#include <doctest.h>

#include <random>

#include "beamcast/metrics.hpp"
#include "beamcast/quadrant.hpp"
#include "metric_oracle.hpp"

using namespace beamcast;

namespace {

EvalTargets to_targets(const oracle::PredictionSet& p) {
  EvalTargets t;
  t.targets = p.targets;
  t.transition = p.transition;
  t.quadrant = p.quadrant;
  return t;
}

}  // namespace

TEST_CASE("target rank orders by logit, ties by index") {
  const std::vector<double> z{1.0, 3.0, 3.0, 0.0};
  CHECK(target_rank(z, 1) == 0);
  CHECK(target_rank(z, 2) == 1);
  CHECK(target_rank(z, 0) == 2);
  CHECK(target_rank(z, 3) == 3);
}

TEST_CASE("top-k on a hand example") {
  const std::vector<std::vector<double>> z{{0.1, 0.5, 0.4, 0.0}, {1.0, 0.0, 0.0, 0.0},
                                           {0.0, 0.0, 0.0, 1.0}};
  const std::vector<int> t{2, 0, 2};
  CHECK(topk_accuracy(z, t, 1) == doctest::Approx(1.0 / 3));
  CHECK(topk_accuracy(z, t, 3) == doctest::Approx(2.0 / 3));
  // in the third row classes 0,1,2 tie behind 3: class 2 has rank 3
  CHECK(topk_accuracy(std::vector<std::vector<double>>{z[2]}, std::vector<int>{2}, 3) == 0.0);
  CHECK(topk_accuracy(z, t, 4) == 1.0);
}

TEST_CASE("metrics equal the brute-force recount on random prediction sets") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto p = oracle::random_prediction_set(rng);
    const auto want = oracle::recount(p.logits, p.targets, p.transition, p.quadrant);
    const auto got = compute_metrics(p.logits, to_targets(p));
    CHECK(got.top1 == want.top1);
    CHECK(got.top3 == want.top3);
    CHECK(got.top3 >= got.top1);
    CHECK(got.n_transition == want.n_transition);
    CHECK(got.transition.value == want.transition);
    for (int q = 0; q < 4; ++q) {
      CHECK(got.scene[q].value == want.scene[q]);
      CHECK(got.scene[q].count == want.scene_count[q]);
    }
  }
}

TEST_CASE("empty subsets are undefined, not zero") {
  const std::vector<std::vector<double>> z{{1.0, 0.0}, {0.0, 1.0}};
  EvalTargets t;
  t.targets = {0, 0};
  t.transition = {false, false};
  t.quadrant = {0, 0};
  const auto m = compute_metrics(z, t);
  CHECK_FALSE(m.transition.defined());
  CHECK(m.scene[0].value == 0.5);
  for (int q = 1; q < 4; ++q) CHECK_FALSE(m.scene[q].defined());
}

TEST_CASE("eval targets come from the dataset") {
  DatasetContainer ds;
  ds.slots = 2;
  ds.num_classes = 3;
  DatasetRecord a;
  a.beam_labels = {4, 4, 7};
  a.class_id = 2;
  a.scene = 1;
  a.speed_norm = 0.9f;
  DatasetRecord b;
  b.beam_labels = {1, 7, 7};
  b.class_id = 2;
  b.scene = 0;
  b.speed_norm = 0.1f;
  ds.records = {a, b};
  const auto t = eval_targets(ds);
  CHECK(t.targets == std::vector<int>{2, 2});
  CHECK(t.transition == std::vector<bool>{true, false});
  CHECK(t.quadrant == std::vector<int>{hard_assignment(1, 0.9), hard_assignment(0, 0.1)});
}

TEST_CASE("report text round trip") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = oracle::random_prediction_set(rng);
    const auto m = compute_metrics(p.logits, to_targets(p));
    const auto text = "# comment\n" + format_report(m, "test.");
    const auto back = parse_metrics_report(parse_key_values(text), "test.");
    CHECK(back.top1 == m.top1);
    CHECK(back.top3 == m.top3);
    CHECK(back.transition.value == m.transition.value);
    CHECK(back.transition.correct == m.transition.correct);
    for (int q = 0; q < 4; ++q) {
      CHECK(back.scene[q].value == m.scene[q].value);
      CHECK(back.scene[q].count == m.scene[q].count);
    }
    CHECK(format_report(back, "test.") == format_report(m, "test."));
  }
  CHECK_THROWS_AS(parse_key_values("no equals sign\n"), FormatError);
  CHECK_THROWS_AS(parse_metrics_report(parse_key_values("top1=0.5\n")), FormatError);
  CHECK_THROWS_AS(parse_metrics_report(parse_key_values("top1=abc\ntop3=1\n")), FormatError);
}

TEST_CASE("table round trip") {
  Table t;
  t.columns = metrics_columns();
  MetricsReport m;
  m.top1 = 0.25;
  m.top3 = 0.5;
  m.n_total = 8;
  t.rows.push_back(metrics_row("full", m));
  const auto back = parse_table(format_table(t));
  CHECK(back.columns == t.columns);
  CHECK(back.rows == t.rows);
  CHECK(back.rows[0][3] == "undefined");
  Table bad = t;
  bad.rows[0][0] = "a,b";
  CHECK_THROWS_AS(format_table(bad), FormatError);
  CHECK_THROWS_AS(parse_table("a,b\n1\n"), FormatError);
  CHECK_THROWS_AS(parse_table(""), FormatError);
}
