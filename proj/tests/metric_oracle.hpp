#pragma once

// Brute-force recount of the evaluation metrics, sharing no code with the
// library: classes are ordered by a stable sort on descending logit.

#include <algorithm>
#include <array>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

namespace oracle {

inline std::vector<int> ranking(const std::vector<double>& z) {
  std::vector<int> idx(z.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return z[a] > z[b]; });
  return idx;
}

struct Counts {
  double top1 = 0, top3 = 0;
  std::optional<double> transition;
  std::array<std::optional<double>, 4> scene;
  std::size_t n_transition = 0;
  std::array<std::size_t, 4> scene_count{};
};

inline Counts recount(const std::vector<std::vector<double>>& logits, const std::vector<int>& t,
                      const std::vector<bool>& trans, const std::vector<int>& quad) {
  Counts c;
  std::size_t hit1 = 0, hit3 = 0, thit = 0;
  std::array<std::size_t, 4> shit{};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto r = ranking(logits[i]);
    const bool h1 = r[0] == t[i];
    bool h3 = false;
    for (std::size_t k = 0; k < std::min<std::size_t>(3, r.size()); ++k) h3 = h3 || r[k] == t[i];
    hit1 += h1;
    hit3 += h3;
    if (trans[i]) {
      ++c.n_transition;
      thit += h1;
    }
    ++c.scene_count[quad[i]];
    shit[quad[i]] += h1;
  }
  const double n = static_cast<double>(logits.size());
  c.top1 = hit1 / n;
  c.top3 = hit3 / n;
  if (c.n_transition) c.transition = static_cast<double>(thit) / c.n_transition;
  for (int q = 0; q < 4; ++q)
    if (c.scene_count[q]) c.scene[q] = static_cast<double>(shit[q]) / c.scene_count[q];
  return c;
}

/// Random prediction set; logits are drawn from a small integer range so
/// that ties are frequent.
struct PredictionSet {
  std::vector<std::vector<double>> logits;
  std::vector<int> targets;
  std::vector<bool> transition;
  std::vector<int> quadrant;
};

inline PredictionSet random_prediction_set(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> nn(1, 40), cc(2, 12), lv(-3, 3), qq(0, 3);
  std::bernoulli_distribution coin(0.3), skip(0.2);
  PredictionSet p;
  const int n = nn(rng), classes = cc(rng);
  std::uniform_int_distribution<int> tt(0, classes - 1);
  // sometimes a quadrant is absent, sometimes there are no transitions
  const bool no_trans = skip(rng);
  const int missing_q = skip(rng) ? qq(rng) : -1;
  for (int i = 0; i < n; ++i) {
    std::vector<double> z(classes);
    for (auto& v : z) v = 0.5 * lv(rng);
    p.logits.push_back(z);
    p.targets.push_back(tt(rng));
    p.transition.push_back(!no_trans && coin(rng));
    int q = qq(rng);
    if (q == missing_q) q = (q + 1) % 4;
    p.quadrant.push_back(q);
  }
  return p;
}

}  // namespace oracle
