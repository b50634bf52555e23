#include "qpi/stats.hpp"

#include <algorithm>
#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <numeric>
#include <ostream>

#include "qpi/error.hpp"

namespace qpi::stats {

double chi_square_sf(double x, double dof) {
  if (!(dof > 0.0)) throw DomainError("chi-square degrees of freedom must be positive");
  if (x <= 0.0) return 1.0;
  return boost::math::gamma_q(0.5 * dof, 0.5 * x);
}

KruskalWallisResult kruskal_wallis(std::span<const Group> groups) {
  if (groups.size() < 2) throw DataError("Kruskal-Wallis needs at least two groups");
  struct Obs {
    double value;
    std::size_t group;
  };
  std::vector<Obs> all;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].values.empty()) throw DataError("Kruskal-Wallis group '" + groups[g].name + "' is empty");
    for (double v : groups[g].values) all.push_back({v, g});
  }
  std::stable_sort(all.begin(), all.end(), [](const Obs& a, const Obs& b) { return a.value < b.value; });

  const auto n = static_cast<double>(all.size());
  std::vector<double> rank_sum(groups.size(), 0.0);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].value == all[i].value) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    const auto t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    for (std::size_t k = i; k < j; ++k) rank_sum[all[k].group] += avg_rank;
    i = j;
  }

  KruskalWallisResult r;
  r.degrees_of_freedom = groups.size() - 1;
  const double correction = 1.0 - tie_term / (n * n * n - n);
  if (correction <= 0.0) return r;  // every observation identical
  double s = 0.0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    s += rank_sum[g] * rank_sum[g] / static_cast<double>(groups[g].values.size());
  }
  r.h = std::max(0.0, (12.0 / (n * (n + 1.0)) * s - 3.0 * (n + 1.0)) / correction);
  r.p_value = chi_square_sf(r.h, static_cast<double>(r.degrees_of_freedom));
  return r;
}

PosthocResult bonferroni_posthoc(std::span<const Group> groups, double alpha, bool require_omnibus) {
  PosthocResult result;
  result.omnibus = kruskal_wallis(groups);
  result.gate_passed = !require_omnibus || result.omnibus.p_value < alpha;
  const std::size_t g = groups.size();
  const double adjusted = alpha / static_cast<double>(g * (g - 1) / 2);
  for (std::size_t a = 0; a < g; ++a) {
    for (std::size_t b = a + 1; b < g; ++b) {
      const Group pair[2] = {groups[a], groups[b]};
      const auto kw = kruskal_wallis(pair);
      result.pairs.push_back({groups[a].name, groups[b].name, kw.h, kw.p_value, adjusted,
                              result.gate_passed && kw.p_value < adjusted});
    }
  }
  return result;
}

void write_posthoc_csv(std::ostream& out, const PosthocResult& result) {
  out << "group_a,group_b,H,p,adjusted_alpha,significant\n";
  const auto old_precision = out.precision(17);
  for (const auto& p : result.pairs) {
    out << p.group_a << ',' << p.group_b << ',' << p.h << ',' << p.p_value << ',' << p.adjusted_alpha << ','
        << (p.significant ? "true" : "false") << '\n';
  }
  out.precision(old_precision);
}

GroupSummary summarize_group(const Group& group) {
  GroupSummary s;
  s.name = group.name;
  s.count = group.values.size();
  if (s.count == 0) return s;
  s.mean = std::accumulate(group.values.begin(), group.values.end(), 0.0) / static_cast<double>(s.count);
  if (s.count > 1) {
    double sq = 0.0;
    for (double v : group.values) sq += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(s.count - 1));
    s.standard_error = s.stddev / std::sqrt(static_cast<double>(s.count));
  }
  return s;
}

std::vector<PredictionRecord> find_mislabeled(std::span<const PredictionRecord> records, double threshold) {
  std::vector<PredictionRecord> out;
  for (const auto& r : records) {
    if (!r.true_label) throw DataError("find_mislabeled: record '" + r.id + "' has no true label");
    if (r.predicted != *r.true_label && r.confidence >= threshold) out.push_back(r);
  }
  std::sort(out.begin(), out.end(), [](const PredictionRecord& a, const PredictionRecord& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return a.id < b.id;
  });
  return out;
}

}  // namespace qpi::stats
