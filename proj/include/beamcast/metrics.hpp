#pragma once

// Pure accuracy metrics and the textual report format.

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "beamcast/dataset.hpp"

namespace beamcast {

/// Per-sample evaluation targets derived from a dataset.
struct EvalTargets {
  std::vector<int> targets;      // class ids
  std::vector<bool> transition;  // last observed beam != target beam
  std::vector<int> quadrant;     // hard_assignment(s, v̄)

  std::size_t size() const { return targets.size(); }
};

EvalTargets eval_targets(const DatasetContainer& ds);

/// Accuracy over a subset that may be empty (then undefined, never 0).
struct SubsetAccuracy {
  std::optional<double> value;
  std::size_t correct = 0;
  std::size_t count = 0;

  bool defined() const { return value.has_value(); }
};

/// Rank of `target` among `logits`: number of classes ordered before it.
/// Larger logits come first; equal logits are ordered by smaller index.
int target_rank(std::span<const double> logits, int target);

/// Fraction of samples whose target is among the k highest logits.
double topk_accuracy(const std::vector<std::vector<double>>& logits, std::span<const int> targets,
                     int k);

SubsetAccuracy transition_accuracy(std::span<const int> predictions, const EvalTargets& targets);

std::array<SubsetAccuracy, 4> scene_accuracy(std::span<const int> predictions,
                                             const EvalTargets& targets);

struct MetricsReport {
  double top1 = 0.0;
  double top3 = 0.0;
  SubsetAccuracy transition;
  std::array<SubsetAccuracy, 4> scene;
  std::size_t n_total = 0;
  std::size_t n_transition = 0;
};

MetricsReport compute_metrics(const std::vector<std::vector<double>>& logits,
                              const EvalTargets& targets);

// ---- text report format ---------------------------------------------------
//
// One "key=value" per line; '#' starts a comment. Undefined values are
// written as "undefined". Keys are prefixed by the caller (e.g. "test.").

using KeyValues = std::map<std::string, std::string>;

std::string format_number(double v);
std::string format_report(const MetricsReport& report, const std::string& prefix = "");
KeyValues parse_key_values(const std::string& text);
MetricsReport parse_metrics_report(const KeyValues& kv, const std::string& prefix = "");

/// Delimited table: header line then one row per entry, comma separated.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
};

std::string format_table(const Table& table);
Table parse_table(const std::string& text);

/// Standard columns for a row of metrics.
std::vector<std::string> metrics_columns();
std::vector<std::string> metrics_row(const std::string& name, const MetricsReport& report);

}  // namespace beamcast
