#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "aggregate_oracles.hpp"
#include "qpi/aggregate.hpp"
#include "qpi/error.hpp"
#include "qpi/rng.hpp"

using namespace qpi;
using namespace qpi::aggregate;
using oracle::silhouette;
using oracle::two_blobs;

namespace {

explain::ExplanationMap map_of(const std::string& id, Image values) {
  explain::ExplanationMap m;
  m.sample_id = id;
  m.values = std::move(values);
  return m;
}

PredictionRecord record(const std::string& id, int predicted, double confidence, int truth = 0) {
  PredictionRecord r;
  r.id = id;
  r.predicted = predicted;
  r.confidence = confidence;
  r.true_label = truth;
  return r;
}

}  // namespace

TEST_CASE("confidence bins are equal width over [1/K, 1]") {
  CHECK(confidence_bin(0.25, 4, 6) == 0);
  CHECK(confidence_bin(0.1, 4, 6) == 0);
  CHECK(confidence_bin(1.0, 4, 6) == 5);
  CHECK(confidence_bin(0.25 + 0.125 * 1.5, 4, 6) == 1);
  CHECK(confidence_bin(0.999, 4, 6) == 5);
  CHECK_THROWS_AS(confidence_bin(0.5, 1, 6), ConfigError);
  CHECK_THROWS_AS(confidence_bin(0.5, 4, 0), ConfigError);
}

TEST_CASE("identical maps average to themselves") {
  Image m(3, 3);
  std::iota(m.pixels.begin(), m.pixels.end(), 0.0);
  std::vector<explain::ExplanationMap> maps;
  std::vector<PredictionRecord> recs;
  for (int i = 0; i < 5; ++i) {
    maps.push_back(map_of("s" + std::to_string(i), m));
    recs.push_back(record("s" + std::to_string(i), 2, 0.9));
  }
  const MetaGrid g = aggregate_by_confidence(maps, recs, 4, 6);
  const GridCell& cell = g.cell(2, confidence_bin(0.9, 4, 6));
  CHECK(cell.count == 5);
  for (std::size_t p = 0; p < m.size(); ++p) CHECK(cell.mean.pixels[p] == doctest::Approx(m.pixels[p]).epsilon(1e-12));
  CHECK(g.value_min == 0.0);
  CHECK(g.value_max == 8.0);
}

TEST_CASE("opposite maps cancel") {
  std::vector<explain::ExplanationMap> maps{map_of("a", Image(2, 2, 1.0)), map_of("b", Image(2, 2, -1.0))};
  std::vector<PredictionRecord> recs{record("b", 0, 0.5), record("a", 0, 0.5)};
  const MetaGrid g = aggregate_by_confidence(maps, recs, 4, 6);
  const GridCell& cell = g.cell(0, confidence_bin(0.5, 4, 6));
  CHECK(cell.count == 2);
  for (double v : cell.mean.pixels) CHECK(std::abs(v) < 1e-15);
}

TEST_CASE("count-weighted cell means reconstruct the overall mean") {
  Rng rng(11);
  std::vector<explain::ExplanationMap> maps;
  std::vector<PredictionRecord> recs;
  Image total(4, 4);
  for (int i = 0; i < 200; ++i) {
    Image m(4, 4);
    for (auto& v : m.pixels) v = rng.normal();
    for (std::size_t p = 0; p < m.size(); ++p) total.pixels[p] += m.pixels[p] / 200.0;
    const std::string id = "s" + std::to_string(i);
    maps.push_back(map_of(id, m));
    recs.push_back(record(id, static_cast<int>(rng.below(4)), rng.uniform(0.25, 1.0)));
  }
  for (GroupBy by : {GroupBy::predicted, GroupBy::true_label}) {
    const MetaGrid g = aggregate_by_confidence(maps, recs, 4, 6, by);
    Image sum(4, 4);
    std::size_t n = 0;
    for (const auto& cell : g.cells) {
      n += cell.count;
      for (std::size_t p = 0; p < sum.size() && cell.count > 0; ++p)
        sum.pixels[p] += cell.mean.pixels[p] * static_cast<double>(cell.count) / 200.0;
    }
    CHECK(n == 200);
    for (std::size_t p = 0; p < sum.size(); ++p) CHECK(std::abs(sum.pixels[p] - total.pixels[p]) < 1e-9);
  }
}

TEST_CASE("aggregation rejects mismatched inputs") {
  std::vector<explain::ExplanationMap> maps{map_of("a", Image(2, 2)), map_of("b", Image(3, 2))};
  std::vector<PredictionRecord> recs{record("a", 0, 0.5), record("b", 0, 0.5)};
  CHECK_THROWS_AS(aggregate_by_confidence(maps, recs, 4), DimensionError);
  maps[1] = map_of("c", Image(2, 2));
  CHECK_THROWS_AS(aggregate_by_confidence(maps, recs, 4), DataError);
  maps[1] = map_of("a", Image(2, 2));
  CHECK_THROWS_AS(aggregate_by_confidence(maps, recs, 4), DataError);
  maps.pop_back();
  CHECK_THROWS_AS(aggregate_by_confidence(maps, recs, 4), DataError);
  recs = {record("a", 7, 0.5)};
  CHECK_THROWS_AS(aggregate_by_confidence(maps, recs, 4), DataError);
}

TEST_CASE("k-means on a hand example") {
  const std::vector<std::vector<double>> pts{{0.0}, {1.0}, {10.0}, {11.0}};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto r = kmeans(pts, 2, seed);
    std::vector<double> c{r.centers[0][0], r.centers[1][0]};
    std::sort(c.begin(), c.end());
    CHECK(c[0] == doctest::Approx(0.5));
    CHECK(c[1] == doctest::Approx(10.5));
    CHECK(r.inertia == doctest::Approx(1.0));
    CHECK(r.labels[0] == r.labels[1]);
    CHECK(r.labels[2] == r.labels[3]);
    CHECK(r.labels[0] != r.labels[2]);
  }
}

TEST_CASE("k-means invariants") {
  std::vector<int> truth;
  const auto pts = two_blobs(120, 3, truth);
  SUBCASE("k = n gives zero inertia") {
    const std::vector<std::vector<double>> few(pts.begin(), pts.begin() + 10);
    CHECK(kmeans(few, 10, 1).inertia < 1e-20);
  }
  SUBCASE("inertia trace is non-increasing and matches a recomputation") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto r = kmeans(pts, 5, seed);
      for (std::size_t i = 1; i < r.inertia_trace.size(); ++i)
        CHECK(r.inertia_trace[i] <= r.inertia_trace[i - 1] + 1e-9);
      CHECK(r.inertia == doctest::Approx(inertia(pts, r.labels, r.centers)).epsilon(1e-12));
      CHECK(r.inertia <= r.inertia_trace.back() + 1e-9);
    }
  }
  SUBCASE("separated blobs are recovered exactly") {
    const auto r = kmeans(pts, 2, 9);
    const auto comp = cluster_composition(r.labels, truth, 2, 2);
    for (std::size_t c = 0; c < 2; ++c) {
      CHECK(std::max(comp.percent[c][0], comp.percent[c][1]) == 100.0);
    }
  }
  SUBCASE("deterministic for a seed") {
    CHECK(kmeans(pts, 4, 5).labels == kmeans(pts, 4, 5).labels);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(kmeans(pts, 0, 1), ConfigError);
    CHECK_THROWS_AS(kmeans(pts, pts.size() + 1, 1), ConfigError);
  }
}

TEST_CASE("k-means with duplicate points still fills every cluster") {
  std::vector<std::vector<double>> pts(8, std::vector<double>{1.0, 1.0});
  pts.push_back({5.0, 5.0});
  const auto r = kmeans(pts, 3, 2);
  std::vector<int> seen(3, 0);
  for (int l : r.labels) seen[static_cast<std::size_t>(l)] = 1;
  CHECK(seen == std::vector<int>{1, 1, 1});
}

TEST_CASE("cluster composition rows sum to 100") {
  Rng rng(4);
  std::vector<int> cl, k;
  for (int i = 0; i < 300; ++i) {
    cl.push_back(static_cast<int>(rng.below(5)));
    k.push_back(static_cast<int>(rng.below(4)));
  }
  const auto comp = cluster_composition(cl, k, 6, 4);
  for (std::size_t c = 0; c < 5; ++c) {
    CHECK(std::accumulate(comp.percent[c].begin(), comp.percent[c].end(), 0.0) == doctest::Approx(100.0));
    CHECK(comp.dominant[c] >= 0);
  }
  CHECK(comp.sizes[5] == 0);
  CHECK(comp.dominant[5] == -1);
  std::ostringstream csv;
  const std::vector<std::string> names{"A", "B", "C", "D"};
  write_composition_csv(csv, comp, names);
  CHECK(csv.str().rfind("cluster,size,A,B,C,D,dominant\n", 0) == 0);
  CHECK(csv.str().find(",none\n") != std::string::npos);
}

TEST_CASE("t-SNE affinity invariants") {
  std::vector<int> truth;
  const auto pts = two_blobs(60, 5, truth);
  const auto a = tsne_affinities(pts, 10.0);
  const std::size_t n = pts.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0, entropy = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double p = a.conditional[i * n + j];
      row += p;
      if (p > 0.0) entropy -= p * std::log(p);
      CHECK(a.joint[i * n + j] == a.joint[j * n + i]);
      total += a.joint[i * n + j];
    }
    CHECK(a.conditional[i * n + i] == 0.0);
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(entropy - std::log(10.0)) < 1e-4);
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("t-SNE lowers an oversized perplexity") {
  std::vector<int> truth;
  const auto pts = two_blobs(30, 6, truth);
  const auto a = tsne_affinities(pts, 30.0);
  CHECK(a.perplexity < 10.0 + 1e-12);
}

TEST_CASE("t-SNE separates two blobs and lowers KL") {
  std::vector<int> truth;
  const auto pts = two_blobs(100, 7, truth);
  TsneConfig cfg;
  cfg.perplexity = 20.0;
  cfg.iterations = 500;
  cfg.seed = 3;
  const Embedding e = tsne(pts, cfg);
  CHECK(e.points.size() == 100);
  CHECK(silhouette(e.points, truth) > 0.5);
  CHECK(e.kl_final < e.kl_after_exaggeration);
  const Embedding again = tsne(pts, cfg);
  CHECK(again.points == e.points);

  std::ostringstream csv;
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) ids.push_back("s" + std::to_string(i));
  write_embedding_csv(csv, ids, e, truth, truth);
  const std::string text = csv.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == 101);
}
