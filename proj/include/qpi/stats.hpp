#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "qpi/inference.hpp"

namespace qpi::stats {

struct Group {
  std::string name;
  std::vector<double> values;
};

struct KruskalWallisResult {
  double h = 0.0;         // tie-corrected statistic
  double p_value = 1.0;   // chi-square upper tail, groups - 1 degrees of freedom
  std::size_t degrees_of_freedom = 0;
};

// Upper tail of the chi-square distribution.
double chi_square_sf(double x, double dof);

// Average ranks for ties. Needs >= 2 groups with >= 1 observation each;
// all-identical observations give H = 0, p = 1.
KruskalWallisResult kruskal_wallis(std::span<const Group> groups);

struct PairwiseResult {
  std::string group_a;
  std::string group_b;
  double h = 0.0;
  double p_value = 1.0;
  double adjusted_alpha = 0.0;
  bool significant = false;
};

struct PosthocResult {
  KruskalWallisResult omnibus;
  bool gate_passed = true;  // omnibus rejected at alpha (or gate disabled)
  std::vector<PairwiseResult> pairs;
};

// Pairwise two-group Kruskal-Wallis tests judged at alpha / C(g, 2). With
// require_omnibus set, pairs are only flagged when the omnibus test rejects.
PosthocResult bonferroni_posthoc(std::span<const Group> groups, double alpha = 0.05, bool require_omnibus = true);

void write_posthoc_csv(std::ostream& out, const PosthocResult& result);

struct GroupSummary {
  std::string name;
  std::size_t count = 0;
  double mean = 0.0;
  double stddev = 0.0;          // sample standard deviation
  double standard_error = 0.0;  // stddev / sqrt(count)
};

GroupSummary summarize_group(const Group& group);

// Records with predicted != true label and confidence >= threshold, sorted by
// confidence descending with id as tiebreak.
std::vector<PredictionRecord> find_mislabeled(std::span<const PredictionRecord> records, double threshold = 0.95);

}  // namespace qpi::stats
