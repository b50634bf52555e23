#pragma once

// Planted-signal scorers and segmentation property checks shared by the unit
// and acceptance suites.

#include <algorithm>
#include <cmath>
#include <queue>
#include <set>
#include <vector>

#include "qpi/explain.hpp"
#include "qpi/preprocess.hpp"
#include "qpi/synthdata.hpp"

namespace oracle {

// Normalized synthetic patches, classes interleaved.
inline std::vector<qpi::Image> normalized_corpus(std::size_t per_class, std::uint64_t seed) {
  qpi::synth::CorpusConfig cc;
  cc.per_class = per_class;
  cc.seed = seed;
  std::vector<qpi::Image> out;
  for (const auto& s : qpi::synth::generate_corpus(qpi::synth::default_specs(), cc)) {
    out.push_back(qpi::preprocess::normalize(s.phase));
  }
  return out;
}

struct SegmentationCheck {
  bool covered = true;    // every pixel carries a label in [0, count)
  bool connected = true;  // every label forms one 4-connected region
  std::size_t count = 0;
};

inline SegmentationCheck check_segmentation(const qpi::explain::Segmentation& seg) {
  SegmentationCheck out;
  out.count = seg.count;
  const std::size_t h = seg.height, w = seg.width;
  if (seg.labels.size() != h * w) {
    out.covered = false;
    return out;
  }
  std::vector<std::size_t> first(seg.count, h * w), size(seg.count, 0);
  for (std::size_t p = 0; p < h * w; ++p) {
    const int l = seg.labels[p];
    if (l < 0 || static_cast<std::size_t>(l) >= seg.count) {
      out.covered = false;
      return out;
    }
    ++size[static_cast<std::size_t>(l)];
    first[static_cast<std::size_t>(l)] = std::min(first[static_cast<std::size_t>(l)], p);
  }
  for (std::size_t l = 0; l < seg.count; ++l) {
    if (size[l] == 0) {
      out.covered = false;
      continue;
    }
    // Breadth-first fill from the first pixel must reach the whole label.
    std::vector<char> seen(h * w, 0);
    std::queue<std::size_t> q;
    q.push(first[l]);
    seen[first[l]] = 1;
    std::size_t reached = 0;
    while (!q.empty()) {
      const std::size_t p = q.front();
      q.pop();
      ++reached;
      const std::size_t r = p / w, c = p % w;
      const std::size_t nb[4] = {r > 0 ? p - w : p, r + 1 < h ? p + w : p, c > 0 ? p - 1 : p, c + 1 < w ? p + 1 : p};
      for (std::size_t n : nb) {
        if (!seen[n] && seg.labels[n] == static_cast<int>(l)) {
          seen[n] = 1;
          q.push(n);
        }
      }
    }
    if (reached != size[l]) out.connected = false;
  }
  return out;
}

// Score = mean absolute deviation of one segment's pixels from the fill
// value: exactly 0 when the segment is switched off, positive when present.
inline qpi::explain::ScoreFn segment_presence(const qpi::explain::Segmentation& seg, int segment, double fill) {
  return [seg, segment, fill](std::span<const qpi::Image> images) {
    std::vector<double> out;
    for (const auto& img : images) {
      double s = 0.0, n = 0.0;
      for (std::size_t p = 0; p < img.size(); ++p) {
        if (seg.labels[p] != segment) continue;
        s += std::abs(img.pixels[p] - fill);
        n += 1.0;
      }
      out.push_back(n > 0 ? s / n : 0.0);
    }
    return out;
  };
}

// One planted-segment LIME trial: does segment 3 of segmenter 1 carry the
// largest positive surrogate weight of that segmentation?
inline bool planted_segment_recovered(const qpi::Image& patch, std::uint64_t seed) {
  using namespace qpi::explain;
  const LimeConfig cfg;
  const Segmentation seg = slic(patch, cfg.segmenters[1]);
  const auto result = lime(segment_presence(seg, 3, patch.mean()), patch, cfg, seed);
  const auto& w = result.surrogates[1].weights;
  const auto best = std::max_element(w.begin(), w.end()) - w.begin();
  return best == 3 && w[3] > 0.0;
}

// Score = sum of the pixels inside a square region.
inline qpi::explain::ScoreFn region_intensity(std::size_t r0, std::size_t c0, std::size_t size) {
  return [=](std::span<const qpi::Image> images) {
    std::vector<double> out;
    for (const auto& img : images) {
      double s = 0.0;
      for (std::size_t r = r0; r < r0 + size; ++r)
        for (std::size_t c = c0; c < c0 + size; ++c) s += img.at(r, c);
      out.push_back(s);
    }
    return out;
  };
}

inline qpi::explain::ScoreFn constant_score(double value) {
  return [value](std::span<const qpi::Image> images) { return std::vector<double>(images.size(), value); };
}

}  // namespace oracle
