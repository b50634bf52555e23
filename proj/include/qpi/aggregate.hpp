#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "qpi/explain.hpp"
#include "qpi/inference.hpp"

namespace qpi::aggregate {

enum class GroupBy { predicted, true_label };

struct GridCell {
  Image mean;  // empty image when count == 0
  std::size_t count = 0;
};

// classes x bins averaged explanation maps; cell (k, b) sits at k * bins + b.
struct MetaGrid {
  std::size_t classes = 0;
  std::size_t bins = 0;
  double lo = 0.0;  // 1 / classes
  double hi = 1.0;
  std::vector<GridCell> cells;
  double value_min = 0.0;  // over populated cells, for shared colour scaling
  double value_max = 0.0;

  const GridCell& cell(std::size_t k, std::size_t b) const { return cells.at(k * bins + b); }
};

// Equal-width bins over [1/classes, 1]; bin b covers [lo + b w, lo + (b+1) w)
// with 1 in the top bin. Confidences below 1/classes go to bin 0.
std::size_t confidence_bin(double confidence, std::size_t classes, std::size_t bins);

// Averages maps per (class, confidence bin). Maps are matched to records by
// sample id; DataError for unknown, duplicate or missing ids, DimensionError
// for maps of differing extent.
MetaGrid aggregate_by_confidence(std::span<const explain::ExplanationMap> maps,
                                 std::span<const PredictionRecord> records, std::size_t classes,
                                 std::size_t bins = 6, GroupBy group_by = GroupBy::predicted);

// Directory of cell_<class>_<bin>.qpit tensors plus index.json with counts
// and the shared value range.
void write_grid(const std::filesystem::path& dir, const MetaGrid& grid, std::span<const std::string> class_names);

struct TsneConfig {
  double perplexity = 30.0;
  std::size_t iterations = 1000;
  double exaggeration = 12.0;
  std::size_t exaggeration_iterations = 250;
  double learning_rate = 200.0;
  double momentum = 0.5;
  double final_momentum = 0.8;
  std::size_t momentum_switch = 250;
  std::uint64_t seed = 0;
};

struct Affinities {
  std::vector<double> conditional;  // n x n, row i is p_{j|i}, rows sum to 1
  std::vector<double> joint;        // (P + P^T) / (2n), symmetric, sums to 1
  std::vector<double> beta;         // per-point precision 1 / (2 sigma^2)
  double perplexity = 0.0;          // value actually used
};

// Binary search on each point's precision until the entropy of p_{.|i} is
// within 1e-5 of ln(perplexity). Perplexity is lowered to (n - 1) / 3 with a
// warning when n < 3 * perplexity.
Affinities tsne_affinities(std::span<const std::vector<double>> points, double perplexity);

struct Embedding {
  std::vector<std::array<double, 2>> points;
  double perplexity = 0.0;
  double kl_after_exaggeration = 0.0;
  double kl_final = 0.0;
};

// Exact O(n^2) t-SNE with early exaggeration, momentum switch and adaptive
// gains. Initial coordinates are N(0, 1e-4) from the seed.
Embedding tsne(std::span<const std::vector<double>> points, const TsneConfig& config);

// KL(P || Q) of an embedding against joint affinities.
double tsne_kl(std::span<const double> joint, std::span<const std::array<double, 2>> embedding);

struct KMeansResult {
  std::vector<int> labels;
  std::vector<std::vector<double>> centers;
  double inertia = 0.0;
  std::vector<double> inertia_trace;  // after each assignment step
  std::size_t iterations = 0;
};

// k-means++ seeding then Lloyd iterations until every centre moves less than
// 1e-8 or 300 iterations pass. An empty cluster is reseeded to the point
// farthest from its centre. ConfigError unless 1 <= k <= n.
KMeansResult kmeans(std::span<const std::vector<double>> points, std::size_t k, std::uint64_t seed);

// Sum of squared distances of points to their labelled centres.
double inertia(std::span<const std::vector<double>> points, std::span<const int> labels,
               std::span<const std::vector<double>> centers);

struct ClusterComposition {
  std::vector<std::size_t> sizes;
  std::vector<std::vector<double>> percent;  // [cluster][class], rows sum to 100
  std::vector<int> dominant;                  // -1 for an empty cluster
};

ClusterComposition cluster_composition(std::span<const int> cluster_labels, std::span<const int> classes,
                                       std::size_t clusters, std::size_t class_count);

// cluster,size,<class names...>,dominant
void write_composition_csv(std::ostream& out, const ClusterComposition& comp,
                           std::span<const std::string> class_names);

// id,x,y,cluster,class
void write_embedding_csv(std::ostream& out, std::span<const std::string> ids, const Embedding& embedding,
                         std::span<const int> clusters, std::span<const int> classes);

}  // namespace qpi::aggregate
