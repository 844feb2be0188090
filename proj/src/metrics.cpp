#include "beamcast/metrics.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

#include "beamcast/common.hpp"
#include "beamcast/quadrant.hpp"

namespace beamcast {

EvalTargets eval_targets(const DatasetContainer& ds) {
  EvalTargets t;
  const auto flags = transition_flags(ds.records);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    t.targets.push_back(r.class_id);
    t.transition.push_back(flags[i]);
    t.quadrant.push_back(hard_assignment(r.scene, r.speed_norm));
  }
  return t;
}

int target_rank(std::span<const double> logits, int target) {
  const double zt = logits[target];
  int rank = 0;
  for (int c = 0; c < static_cast<int>(logits.size()); ++c)
    if (logits[c] > zt || (logits[c] == zt && c < target)) ++rank;
  return rank;
}

double topk_accuracy(const std::vector<std::vector<double>>& logits, std::span<const int> targets,
                     int k) {
  if (logits.empty()) throw UndefinedMetricError("top-k accuracy of an empty set");
  if (logits.size() != targets.size()) throw ConfigError("logits/targets size mismatch");
  const int C = static_cast<int>(logits.front().size());
  if (k < 1 || k > C) throw ConfigError("top-k requires 1 <= k <= C");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (target_rank(logits[i], targets[i]) < k) ++hits;
  return static_cast<double>(hits) / static_cast<double>(logits.size());
}

namespace {

SubsetAccuracy finish(std::size_t correct, std::size_t count) {
  SubsetAccuracy a;
  a.correct = correct;
  a.count = count;
  if (count > 0) a.value = static_cast<double>(correct) / static_cast<double>(count);
  return a;
}

}  // namespace

SubsetAccuracy transition_accuracy(std::span<const int> predictions, const EvalTargets& t) {
  std::size_t correct = 0, count = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!t.transition[i]) continue;
    ++count;
    if (predictions[i] == t.targets[i]) ++correct;
  }
  return finish(correct, count);
}

std::array<SubsetAccuracy, 4> scene_accuracy(std::span<const int> predictions,
                                             const EvalTargets& t) {
  std::array<std::size_t, 4> correct{}, count{};
  for (std::size_t i = 0; i < t.size(); ++i) {
    const int q = t.quadrant[i];
    ++count[q];
    if (predictions[i] == t.targets[i]) ++correct[q];
  }
  std::array<SubsetAccuracy, 4> out;
  for (int q = 0; q < 4; ++q) out[q] = finish(correct[q], count[q]);
  return out;
}

MetricsReport compute_metrics(const std::vector<std::vector<double>>& logits,
                              const EvalTargets& t) {
  MetricsReport r;
  r.n_total = logits.size();
  r.top1 = topk_accuracy(logits, t.targets, 1);
  const int C = static_cast<int>(logits.front().size());
  r.top3 = topk_accuracy(logits, t.targets, std::min(3, C));
  std::vector<int> pred(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    int best = 0;
    for (int c = 1; c < C; ++c)
      if (logits[i][c] > logits[i][best]) best = c;
    pred[i] = best;
  }
  r.transition = transition_accuracy(pred, t);
  r.n_transition = r.transition.count;
  r.scene = scene_accuracy(pred, t);
  return r;
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

std::string fmt_subset(const SubsetAccuracy& a) {
  return a.value ? format_number(*a.value) : std::string("undefined");
}

}  // namespace

std::string format_report(const MetricsReport& r, const std::string& prefix) {
  std::ostringstream os;
  os << prefix << "top1=" << format_number(r.top1) << "\n";
  os << prefix << "top3=" << format_number(r.top3) << "\n";
  os << prefix << "transition_acc=" << fmt_subset(r.transition) << "\n";
  os << prefix << "n_total=" << r.n_total << "\n";
  os << prefix << "n_transition=" << r.n_transition << "\n";
  for (int q = 0; q < 4; ++q) {
    const std::string key = std::string(kQuadrantNames[q]);
    os << prefix << "scene_acc." << key << "=" << fmt_subset(r.scene[q]) << "\n";
    os << prefix << "scene_count." << key << "=" << r.scene[q].count << "\n";
  }
  return os.str();
}

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\r')) line.pop_back();
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0)
      throw FormatError("report line " + std::to_string(lineno) + " is not key=value");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

namespace {

const std::string& need(const KeyValues& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError("report lacks key '" + key + "'");
  return it->second;
}

double to_double(const std::string& s) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw FormatError("bad number '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw FormatError("bad number '" + s + "'");
  }
}

std::size_t to_count(const std::string& s) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw FormatError("bad count '" + s + "'");
  return v;
}

SubsetAccuracy parse_subset(const std::string& v, std::size_t count) {
  SubsetAccuracy a;
  a.count = count;
  if (v != "undefined") {
    a.value = to_double(v);
    a.correct = static_cast<std::size_t>(std::llround(*a.value * static_cast<double>(count)));
  }
  return a;
}

}  // namespace

MetricsReport parse_metrics_report(const KeyValues& kv, const std::string& prefix) {
  MetricsReport r;
  r.top1 = to_double(need(kv, prefix + "top1"));
  r.top3 = to_double(need(kv, prefix + "top3"));
  r.n_total = to_count(need(kv, prefix + "n_total"));
  r.n_transition = to_count(need(kv, prefix + "n_transition"));
  r.transition = parse_subset(need(kv, prefix + "transition_acc"), r.n_transition);
  for (int q = 0; q < 4; ++q) {
    const std::string key(kQuadrantNames[q]);
    r.scene[q] = parse_subset(need(kv, prefix + "scene_acc." + key),
                              to_count(need(kv, prefix + "scene_count." + key)));
  }
  return r;
}

std::string format_table(const Table& t) {
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (cells[i].find_first_of(",\n") != std::string::npos)
        throw FormatError("table cell contains a delimiter: " + cells[i]);
      os << (i ? "," : "") << cells[i];
    }
    os << "\n";
  };
  line(t.columns);
  for (const auto& row : t.rows) {
    if (row.size() != t.columns.size()) throw FormatError("table row has wrong arity");
    line(row);
  }
  return os.str();
}

Table parse_table(const std::string& text) {
  Table t;
  std::istringstream is(text);
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const auto comma = s.find(',', start);
      cells.push_back(s.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return cells;
  };
  bool header = true;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header) {
      t.columns = split(line);
      header = false;
      continue;
    }
    auto cells = split(line);
    if (cells.size() != t.columns.size()) throw FormatError("table row has wrong arity");
    t.rows.push_back(std::move(cells));
  }
  if (header) throw FormatError("empty table");
  return t;
}

std::vector<std::string> metrics_columns() {
  return {"name",          "top1",          "top3",           "transition_acc", "n_transition",
          "scene_acc.LOS-L", "scene_acc.LOS-H", "scene_acc.NLOS-L", "scene_acc.NLOS-H", "n_total"};
}

std::vector<std::string> metrics_row(const std::string& name, const MetricsReport& r) {
  std::vector<std::string> row{name, format_number(r.top1), format_number(r.top3),
                               fmt_subset(r.transition), std::to_string(r.n_transition)};
  for (int q = 0; q < 4; ++q) row.push_back(fmt_subset(r.scene[q]));
  row.push_back(std::to_string(r.n_total));
  return row;
}

}  // namespace beamcast
