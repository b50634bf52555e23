#include "qpi/aggregate.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <ostream>
#include <unordered_map>

#include "qpi/error.hpp"
#include "qpi/rng.hpp"
#include "qpi/tensor_io.hpp"

namespace qpi::aggregate {

std::size_t confidence_bin(double confidence, std::size_t classes, std::size_t bins) {
  if (classes < 2) throw ConfigError("confidence grid needs at least 2 classes");
  if (bins < 1) throw ConfigError("confidence grid needs at least 1 bin");
  const double lo = 1.0 / static_cast<double>(classes);
  const double width = (1.0 - lo) / static_cast<double>(bins);
  const double pos = std::floor((confidence - lo) / width);
  if (!(pos > 0.0)) return 0;
  return std::min(static_cast<std::size_t>(pos), bins - 1);
}

MetaGrid aggregate_by_confidence(std::span<const explain::ExplanationMap> maps,
                                 std::span<const PredictionRecord> records, std::size_t classes, std::size_t bins,
                                 GroupBy group_by) {
  MetaGrid grid;
  grid.classes = classes;
  grid.bins = bins;
  grid.lo = 1.0 / static_cast<double>(classes);
  grid.cells.resize(classes * bins);

  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!by_id.emplace(records[i].id, i).second) throw DataError("duplicate prediction id '" + records[i].id + "'");
  }
  std::vector<char> used(records.size(), 0);
  std::size_t h = 0, w = 0;
  for (const auto& m : maps) {
    const auto it = by_id.find(m.sample_id);
    if (it == by_id.end()) throw DataError("explanation '" + m.sample_id + "' has no prediction record");
    if (used[it->second]) throw DataError("duplicate explanation for '" + m.sample_id + "'");
    used[it->second] = 1;
    if (h == 0 && w == 0) {
      h = m.values.height;
      w = m.values.width;
    } else if (m.values.height != h || m.values.width != w) {
      throw DimensionError("explanation maps differ in extent");
    }
    const PredictionRecord& rec = records[it->second];
    int cls = rec.predicted;
    if (group_by == GroupBy::true_label) {
      if (!rec.true_label) throw DataError("record '" + rec.id + "' has no true label to group by");
      cls = *rec.true_label;
    }
    if (cls < 0 || static_cast<std::size_t>(cls) >= classes) {
      throw DataError("record '" + rec.id + "' has class " + std::to_string(cls) + " outside the grid");
    }
    GridCell& cell = grid.cells[static_cast<std::size_t>(cls) * bins + confidence_bin(rec.confidence, classes, bins)];
    if (cell.count == 0) cell.mean = Image(h, w);
    for (std::size_t p = 0; p < cell.mean.size(); ++p) cell.mean.pixels[p] += m.values.pixels[p];
    ++cell.count;
  }
  for (std::size_t i = 0; i < used.size(); ++i) {
    if (!used[i]) throw DataError("prediction '" + records[i].id + "' has no explanation map");
  }

  bool first = true;
  for (auto& cell : grid.cells) {
    if (cell.count == 0) continue;
    for (auto& v : cell.mean.pixels) v /= static_cast<double>(cell.count);
    const auto [mn, mx] = std::minmax_element(cell.mean.pixels.begin(), cell.mean.pixels.end());
    grid.value_min = first ? *mn : std::min(grid.value_min, *mn);
    grid.value_max = first ? *mx : std::max(grid.value_max, *mx);
    first = false;
  }
  return grid;
}

void write_grid(const std::filesystem::path& dir, const MetaGrid& grid, std::span<const std::string> class_names) {
  if (class_names.size() != grid.classes) throw DimensionError("class name count does not match the grid");
  std::filesystem::create_directories(dir);
  nlohmann::json index;
  index["classes"] = std::vector<std::string>(class_names.begin(), class_names.end());
  index["bins"] = grid.bins;
  index["confidence_range"] = {grid.lo, grid.hi};
  index["value_min"] = grid.value_min;
  index["value_max"] = grid.value_max;
  nlohmann::json cells = nlohmann::json::array();
  for (std::size_t k = 0; k < grid.classes; ++k) {
    for (std::size_t b = 0; b < grid.bins; ++b) {
      const GridCell& cell = grid.cell(k, b);
      nlohmann::json entry{{"class", class_names[k]}, {"bin", b}, {"count", cell.count}};
      if (cell.count > 0) {
        const std::string file = "cell_" + std::to_string(k) + "_" + std::to_string(b) + ".qpit";
        save_tensor(dir / file, Tensor({cell.mean.height, cell.mean.width}, cell.mean.pixels));
        entry["file"] = file;
      }
      cells.push_back(entry);
    }
  }
  index["cells"] = cells;
  std::ofstream out(dir / "index.json");
  if (!out) throw DataError("cannot write " + (dir / "index.json").string());
  out << index.dump(2) << '\n';
}

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

void check_points(std::span<const std::vector<double>> points, const char* what) {
  if (points.empty()) throw DataError(std::string(what) + " needs at least one point");
  for (const auto& p : points) {
    if (p.size() != points[0].size()) throw DimensionError(std::string(what) + ": points differ in dimension");
  }
}

}  // namespace

Affinities tsne_affinities(std::span<const std::vector<double>> points, double perplexity) {
  check_points(points, "t-SNE");
  const std::size_t n = points.size();
  if (n < 4) throw DataError("t-SNE needs at least 4 points");
  if (!(perplexity > 1.0)) throw ConfigError("t-SNE perplexity must exceed 1");
  Affinities a;
  a.perplexity = perplexity;
  if (static_cast<double>(n) < 3.0 * perplexity) {
    a.perplexity = std::max(static_cast<double>(n - 1) / 3.0, 1.0 + 1e-6);
    spdlog::warn("t-SNE perplexity {} too large for {} points, using {}", perplexity, n, a.perplexity);
  }
  const double target = std::log(a.perplexity);

  std::vector<double> d2(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) d2[i * n + j] = d2[j * n + i] = squared_distance(points[i], points[j]);

  a.conditional.assign(n * n, 0.0);
  a.beta.assign(n, 1.0);
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) dmin = std::min(dmin, d2[i * n + j]);
    for (int iter = 0; iter < 200; ++iter) {
      // Shift by the nearest distance so the exponentials never all underflow.
      double sum = 0.0, weighted = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] = j == i ? 0.0 : std::exp(-beta * (d2[i * n + j] - dmin));
        sum += row[j];
        weighted += row[j] * (d2[i * n + j] - dmin);
      }
      const double entropy = std::log(sum) + beta * weighted / sum;
      for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
      const double diff = entropy - target;
      if (std::abs(diff) < 1e-5) break;
      if (diff > 0.0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
      } else {
        hi = beta;
        beta = (beta + lo) / 2.0;
      }
    }
    a.beta[i] = beta;
    std::copy(row.begin(), row.end(), a.conditional.begin() + static_cast<std::ptrdiff_t>(i * n));
  }

  a.joint.assign(n * n, 0.0);
  const double scale = 1.0 / (2.0 * static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a.joint[i * n + j] = (a.conditional[i * n + j] + a.conditional[j * n + i]) * scale;
  return a;
}

double tsne_kl(std::span<const double> joint, std::span<const std::array<double, 2>> y) {
  const std::size_t n = y.size();
  if (joint.size() != n * n) throw DimensionError("t-SNE KL: affinity matrix does not match the embedding");
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
      z += 1.0 / (1.0 + dx * dx + dy * dy);
    }
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double p = joint[i * n + j];
      if (i == j || p <= 0.0) continue;
      const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
      const double q = std::max(1.0 / (1.0 + dx * dx + dy * dy) / z, 1e-300);
      kl += p * std::log(p / q);
    }
  return kl;
}

Embedding tsne(std::span<const std::vector<double>> points, const TsneConfig& config) {
  if (config.iterations < 1) throw ConfigError("t-SNE needs at least one iteration");
  if (!(config.learning_rate > 0.0)) throw ConfigError("t-SNE learning rate must be positive");
  const Affinities aff = tsne_affinities(points, config.perplexity);
  const std::size_t n = points.size();
  Embedding emb;
  emb.perplexity = aff.perplexity;
  emb.points.resize(n);
  Rng rng(config.seed);
  for (auto& p : emb.points) p = {rng.normal(0.0, 1e-2), rng.normal(0.0, 1e-2)};

  std::vector<std::array<double, 2>> update(n, {0.0, 0.0}), gains(n, {1.0, 1.0}), grad(n);
  std::vector<double> num(n * n);
  for (std::size_t iter = 0; iter < config.iterations; ++iter) {
    const double exaggeration = iter < config.exaggeration_iterations ? config.exaggeration : 1.0;
    const double momentum = iter < config.momentum_switch ? config.momentum : config.final_momentum;
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      num[i * n + i] = 0.0;
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = emb.points[i][0] - emb.points[j][0], dy = emb.points[i][1] - emb.points[j][1];
        const double q = 1.0 / (1.0 + dx * dx + dy * dy);
        num[i * n + j] = num[j * n + i] = q;
        z += 2.0 * q;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      double gx = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double q = num[i * n + j];
        const double mult = (exaggeration * aff.joint[i * n + j] - q / z) * q;
        gx += mult * (emb.points[i][0] - emb.points[j][0]);
        gy += mult * (emb.points[i][1] - emb.points[j][1]);
      }
      grad[i] = {4.0 * gx, 4.0 * gy};
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (int d = 0; d < 2; ++d) {
        double& g = gains[i][static_cast<std::size_t>(d)];
        const double gd = grad[i][static_cast<std::size_t>(d)];
        double& u = update[i][static_cast<std::size_t>(d)];
        g = (gd > 0.0) != (u > 0.0) ? g + 0.2 : g * 0.8;
        g = std::max(g, 0.01);
        u = momentum * u - config.learning_rate * g * gd;
        emb.points[i][static_cast<std::size_t>(d)] += u;
      }
    }
    double mx = 0.0, my = 0.0;
    for (const auto& p : emb.points) {
      mx += p[0];
      my += p[1];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    for (auto& p : emb.points) {
      p[0] -= mx;
      p[1] -= my;
    }
    if (iter + 1 == config.exaggeration_iterations) emb.kl_after_exaggeration = tsne_kl(aff.joint, emb.points);
  }
  emb.kl_final = tsne_kl(aff.joint, emb.points);
  if (config.exaggeration_iterations >= config.iterations) emb.kl_after_exaggeration = emb.kl_final;
  return emb;
}

double inertia(std::span<const std::vector<double>> points, std::span<const int> labels,
               std::span<const std::vector<double>> centers) {
  if (labels.size() != points.size()) throw DimensionError("inertia: label count differs from point count");
  double s = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) s += squared_distance(points[i], centers[static_cast<std::size_t>(labels[i])]);
  return s;
}

KMeansResult kmeans(std::span<const std::vector<double>> points, std::size_t k, std::uint64_t seed) {
  check_points(points, "k-means");
  const std::size_t n = points.size(), dim = points[0].size();
  if (k < 1 || k > n) throw ConfigError("k-means needs 1 <= k <= " + std::to_string(n) + ", got " + std::to_string(k));

  Rng rng(seed);
  KMeansResult res;
  res.centers.push_back(points[rng.below(n)]);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  while (res.centers.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], squared_distance(points[i], res.centers.back()));
      total += nearest[i];
    }
    std::size_t pick = n - 1;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        u -= nearest[i];
        if (u < 0.0 && nearest[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.below(n);
    }
    res.centers.push_back(points[pick]);
  }

  res.labels.assign(n, 0);
  std::vector<double> dist(n);
  for (std::size_t iter = 0; iter < 300; ++iter) {
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = squared_distance(points[i], res.centers[c]);
        if (d < best) {
          best = d;
          res.labels[i] = static_cast<int>(c);
        }
      }
      dist[i] = best;
      ++counts[static_cast<std::size_t>(res.labels[i])];
    }
    // Reseed empty clusters with the currently worst-served point.
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      std::size_t far = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (dist[i] > dist[far] && counts[static_cast<std::size_t>(res.labels[i])] > 1) far = i;
      --counts[static_cast<std::size_t>(res.labels[far])];
      res.labels[far] = static_cast<int>(c);
      res.centers[c] = points[far];
      dist[far] = 0.0;
      counts[c] = 1;
    }
    res.inertia_trace.push_back(inertia(points, res.labels, res.centers));
    ++res.iterations;

    std::vector<std::vector<double>> next(k, std::vector<double>(dim, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < dim; ++d) next[static_cast<std::size_t>(res.labels[i])][d] += points[i][d];
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      for (auto& v : next[c]) v /= static_cast<double>(counts[c]);
      shift = std::max(shift, std::sqrt(squared_distance(next[c], res.centers[c])));
    }
    res.centers = std::move(next);
    if (shift < 1e-8) break;
  }
  res.inertia = inertia(points, res.labels, res.centers);
  return res;
}

ClusterComposition cluster_composition(std::span<const int> cluster_labels, std::span<const int> classes,
                                       std::size_t clusters, std::size_t class_count) {
  if (cluster_labels.size() != classes.size()) throw DimensionError("composition: label counts differ");
  ClusterComposition comp;
  comp.sizes.assign(clusters, 0);
  std::vector<std::vector<std::size_t>> counts(clusters, std::vector<std::size_t>(class_count, 0));
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const int c = cluster_labels[i], k = classes[i];
    if (c < 0 || static_cast<std::size_t>(c) >= clusters) throw DataError("composition: cluster label out of range");
    if (k < 0 || static_cast<std::size_t>(k) >= class_count) throw DataError("composition: class label out of range");
    ++comp.sizes[static_cast<std::size_t>(c)];
    ++counts[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)];
  }
  for (std::size_t c = 0; c < clusters; ++c) {
    std::vector<double> row(class_count, 0.0);
    int dominant = -1;
    if (comp.sizes[c] > 0) {
      for (std::size_t k = 0; k < class_count; ++k)
        row[k] = 100.0 * static_cast<double>(counts[c][k]) / static_cast<double>(comp.sizes[c]);
      dominant = static_cast<int>(std::max_element(counts[c].begin(), counts[c].end()) - counts[c].begin());
    }
    comp.percent.push_back(std::move(row));
    comp.dominant.push_back(dominant);
  }
  return comp;
}

void write_composition_csv(std::ostream& out, const ClusterComposition& comp,
                           std::span<const std::string> class_names) {
  out << "cluster,size";
  for (const auto& name : class_names) out << ',' << name;
  out << ",dominant\n";
  for (std::size_t c = 0; c < comp.sizes.size(); ++c) {
    out << c << ',' << comp.sizes[c];
    for (double v : comp.percent[c]) out << ',' << v;
    const int d = comp.dominant[c];
    out << ',' << (d < 0 ? std::string("none") : class_names[static_cast<std::size_t>(d)]) << '\n';
  }
}

void write_embedding_csv(std::ostream& out, std::span<const std::string> ids, const Embedding& embedding,
                         std::span<const int> clusters, std::span<const int> classes) {
  const std::size_t n = embedding.points.size();
  if (ids.size() != n || clusters.size() != n || classes.size() != n) {
    throw DimensionError("embedding CSV: column lengths differ");
  }
  out.precision(17);
  out << "id,x,y,cluster,class\n";
  for (std::size_t i = 0; i < n; ++i) {
    out << ids[i] << ',' << embedding.points[i][0] << ',' << embedding.points[i][1] << ',' << clusters[i] << ','
        << classes[i] << '\n';
  }
}

}  // namespace qpi::aggregate
