#include "qpi/slic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "qpi/error.hpp"

namespace qpi::explain {
namespace {

constexpr int kIterations = 10;

struct DisjointSets {
  std::vector<std::size_t> parent;
  std::vector<std::size_t> size;
  std::vector<char> has_main;

  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  // Joins a into b; b's root survives.
  void join(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    parent[a] = b;
    size[b] += size[a];
    has_main[b] = has_main[b] || has_main[a];
  }
};

// 4-connected components of equal labels, numbered in raster order.
std::vector<std::size_t> components(std::size_t h, std::size_t w, const std::vector<int>& labels,
                                    std::size_t& count) {
  const std::size_t none = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> comp(h * w, none);
  std::vector<std::size_t> stack;
  count = 0;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (comp[start] != none) continue;
    comp[start] = count;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t r = p / w, c = p % w;
      auto visit = [&](std::size_t q) {
        if (comp[q] == none && labels[q] == labels[start]) {
          comp[q] = count;
          stack.push_back(q);
        }
      };
      if (r > 0) visit(p - w);
      if (r + 1 < h) visit(p + w);
      if (c > 0) visit(p - 1);
      if (c + 1 < w) visit(p + 1);
    }
    ++count;
  }
  return comp;
}

}  // namespace

Image gaussian_blur(const Image& image, double sigma) {
  if (!(sigma > 0.0)) return image;
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
    total += kernel[k + radius];
  }
  for (auto& v : kernel) v /= total;

  const auto h = static_cast<int>(image.height), w = static_cast<int>(image.width);
  Image tmp(image.height, image.width), out(image.height, image.width);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double s = 0.0;
      for (int k = -radius; k <= radius; ++k) s += kernel[k + radius] * image.at(r, std::clamp(c + k, 0, w - 1));
      tmp.at(r, c) = s;
    }
  }
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double s = 0.0;
      for (int k = -radius; k <= radius; ++k) s += kernel[k + radius] * tmp.at(std::clamp(r + k, 0, h - 1), c);
      out.at(r, c) = s;
    }
  }
  return out;
}

Segmentation enforce_connectivity(std::size_t h, std::size_t w, const std::vector<int>& labels) {
  std::size_t n_comp = 0;
  const auto comp = components(h, w, labels, n_comp);

  DisjointSets sets{std::vector<std::size_t>(n_comp), std::vector<std::size_t>(n_comp, 0),
                    std::vector<char>(n_comp, 0)};
  std::iota(sets.parent.begin(), sets.parent.end(), std::size_t{0});
  std::vector<int> comp_label(n_comp);
  for (std::size_t p = 0; p < h * w; ++p) {
    ++sets.size[comp[p]];
    comp_label[comp[p]] = labels[p];
  }
  // The largest component of each label (first in raster order on ties) is
  // that label's main region.
  std::vector<std::size_t> main_of;
  {
    const int max_label = *std::max_element(labels.begin(), labels.end());
    main_of.assign(static_cast<std::size_t>(max_label) + 1, std::numeric_limits<std::size_t>::max());
    for (std::size_t k = 0; k < n_comp; ++k) {
      auto& m = main_of[static_cast<std::size_t>(comp_label[k])];
      if (m == std::numeric_limits<std::size_t>::max() || sets.size[k] > sets.size[m]) m = k;
    }
    for (std::size_t m : main_of) {
      if (m != std::numeric_limits<std::size_t>::max()) sets.has_main[m] = 1;
    }
  }

  std::vector<std::size_t> orphans;
  for (std::size_t k = 0; k < n_comp; ++k) {
    if (!sets.has_main[k]) orphans.push_back(k);
  }
  std::stable_sort(orphans.begin(), orphans.end(),
                   [&](std::size_t a, std::size_t b) { return sets.size[a] < sets.size[b]; });

  // Orphan sets join their largest neighbouring set until every set holds a
  // main region.
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t k : orphans) {
      const std::size_t root = sets.find(k);
      if (sets.has_main[root]) continue;
      std::size_t best = root;
      for (std::size_t p = 0; p < h * w; ++p) {
        if (sets.find(comp[p]) != root) continue;
        const std::size_t r = p / w, c = p % w;
        auto consider = [&](std::size_t q) {
          const std::size_t other = sets.find(comp[q]);
          if (other == root) return;
          if (best == root || sets.size[other] > sets.size[best] ||
              (sets.size[other] == sets.size[best] && other < best)) {
            best = other;
          }
        };
        if (r > 0) consider(p - w);
        if (r + 1 < h) consider(p + w);
        if (c > 0) consider(p - 1);
        if (c + 1 < w) consider(p + 1);
      }
      if (best != root) {
        sets.join(root, best);
        changed = true;
      }
    }
  }

  Segmentation seg;
  seg.height = h;
  seg.width = w;
  seg.labels.assign(h * w, -1);
  std::vector<int> relabel(n_comp, -1);
  for (std::size_t p = 0; p < h * w; ++p) {
    const std::size_t root = sets.find(comp[p]);
    if (relabel[root] < 0) relabel[root] = static_cast<int>(seg.count++);
    seg.labels[p] = relabel[root];
  }
  return seg;
}

Segmentation slic(const Image& image, const SlicParams& params) {
  const std::size_t h = image.height, w = image.width, n = h * w;
  if (params.segments < 1 || params.segments > n) {
    throw ConfigError("slic: segments must lie in [1, " + std::to_string(n) + "], got " +
                      std::to_string(params.segments));
  }
  if (!(params.compactness > 0.0)) throw ConfigError("slic: compactness must be positive");

  const Image smooth = gaussian_blur(image, params.sigma);
  const double step = std::sqrt(static_cast<double>(n) / static_cast<double>(params.segments));
  const double ratio = step / params.compactness;
  const std::size_t ny = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(h / step)), 1, h);
  const std::size_t nx = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(w / step)), 1, w);

  struct Center {
    double value, row, col;
  };
  std::vector<Center> centers;
  for (std::size_t i = 0; i < ny; ++i) {
    for (std::size_t j = 0; j < nx; ++j) {
      const double r = (i + 0.5) * static_cast<double>(h) / ny - 0.5;
      const double c = (j + 0.5) * static_cast<double>(w) / nx - 0.5;
      const auto ri = static_cast<std::size_t>(std::lround(r)), ci = static_cast<std::size_t>(std::lround(c));
      centers.push_back({smooth.at(ri, ci) * ratio, r, c});
    }
  }

  std::vector<int> labels(n, 0);
  std::vector<double> sv(centers.size()), sr(centers.size()), sc(centers.size());
  std::vector<std::size_t> count(centers.size());
  for (int it = 0; it < kIterations; ++it) {
    for (std::size_t p = 0; p < n; ++p) {
      const double v = smooth.pixels[p] * ratio;
      const auto r = static_cast<double>(p / w), c = static_cast<double>(p % w);
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < centers.size(); ++k) {
        const double dv = v - centers[k].value, dr = r - centers[k].row, dc = c - centers[k].col;
        const double d = dv * dv + dr * dr + dc * dc;
        if (d < best) {
          best = d;
          labels[p] = static_cast<int>(k);
        }
      }
    }
    std::fill(sv.begin(), sv.end(), 0.0);
    std::fill(sr.begin(), sr.end(), 0.0);
    std::fill(sc.begin(), sc.end(), 0.0);
    std::fill(count.begin(), count.end(), 0);
    for (std::size_t p = 0; p < n; ++p) {
      const auto k = static_cast<std::size_t>(labels[p]);
      sv[k] += smooth.pixels[p] * ratio;
      sr[k] += static_cast<double>(p / w);
      sc[k] += static_cast<double>(p % w);
      ++count[k];
    }
    // Empty clusters keep their previous centre.
    for (std::size_t k = 0; k < centers.size(); ++k) {
      if (!count[k]) continue;
      const auto m = static_cast<double>(count[k]);
      centers[k] = {sv[k] / m, sr[k] / m, sc[k] / m};
    }
  }
  return enforce_connectivity(h, w, labels);
}

}  // namespace qpi::explain
