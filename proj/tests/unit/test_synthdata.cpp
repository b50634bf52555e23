#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "qpi/error.hpp"
#include "qpi/preprocess.hpp"
#include "qpi/stats.hpp"
#include "qpi/synthdata.hpp"

using namespace qpi;
using namespace qpi::synth;

namespace {

// Largest outer contour of a raw patch at the default gate settings.
std::optional<preprocess::Contour> main_contour(const Image& phase) {
  auto cs = preprocess::segment(phase, 0.2, 12);
  if (cs.empty()) return std::nullopt;
  std::size_t best = 0;
  for (std::size_t k = 1; k < cs.size(); ++k) {
    if (cs[k].pixel_count() > cs[best].pixel_count()) best = k;
  }
  return cs[best];
}

std::vector<Sample> small_corpus(std::uint64_t seed, std::size_t per_class = 60) {
  CorpusConfig cfg;
  cfg.per_class = per_class;
  cfg.seed = seed;
  const auto specs = default_specs();
  return generate_corpus(specs, cfg);
}

}  // namespace

TEST_CASE("corpus is deterministic per seed") {
  const auto a = small_corpus(9, 20), b = small_corpus(9, 20), c = small_corpus(10, 20);
  REQUIRE(a.size() == 80);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].label == b[i].label);
    CHECK(a[i].phase.pixels == b[i].phase.pixels);
    any_diff = any_diff || a[i].phase.pixels != c[i].phase.pixels;
  }
  CHECK(any_diff);
  std::set<std::string> ids;
  for (const auto& s : a) ids.insert(s.id);
  CHECK(ids.size() == a.size());
}

TEST_CASE("corpus cells pass the preprocessing gates") {
  const auto corpus = small_corpus(4);
  std::vector<double> diam(4, 0.0);
  std::vector<int> count(4, 0);
  for (const auto& s : corpus) {
    for (double v : s.phase.pixels) REQUIRE(v >= 0.0);
    const auto ct = main_contour(s.phase);
    REQUIRE(ct.has_value());
    const auto f = preprocess::morph_features(*ct, s.phase);
    CAPTURE(s.id);
    CHECK(preprocess::keep_cell(f));
    diam[s.label] += f.diameter;
    ++count[s.label];
  }
  // Monocyte (0) larger than Lymphocyte (1).
  CHECK(diam[0] / count[0] > diam[1] / count[1]);
}

TEST_CASE("class separability floor with a linear rule on diameter and interior variance") {
  const auto corpus = small_corpus(21, 150);
  struct F {
    double d, var;
    int label;
  };
  std::vector<F> feats;
  for (const auto& s : corpus) {
    const auto ct = main_contour(s.phase);
    REQUIRE(ct.has_value());
    const auto f = preprocess::morph_features(*ct, s.phase);
    const double r_px = std::sqrt(ct->pixel_count() / std::numbers::pi);
    double sum = 0, sq = 0;
    int n = 0;
    for (const auto& p : ct->region) {
      if (std::hypot(p.row - ct->centroid_row, p.col - ct->centroid_col) > 0.6 * r_px) continue;
      const double v = s.phase.at(p.row, p.col);
      sum += v;
      sq += v * v;
      ++n;
    }
    const double mean = sum / n;
    feats.push_back({f.diameter, sq / n - mean * mean, s.label});
  }
  // Nearest class mean after standardisation; a linear decision rule.
  double md = 0, mv = 0, sd = 0, sv = 0;
  for (const auto& f : feats) {
    md += f.d;
    mv += f.var;
  }
  md /= feats.size();
  mv /= feats.size();
  for (const auto& f : feats) {
    sd += (f.d - md) * (f.d - md);
    sv += (f.var - mv) * (f.var - mv);
  }
  sd = std::sqrt(sd / feats.size());
  sv = std::sqrt(sv / feats.size());
  double cd[4] = {}, cv[4] = {};
  int cn[4] = {};
  for (std::size_t i = 0; i < feats.size(); i += 2) {  // fit on even, score on odd
    cd[feats[i].label] += (feats[i].d - md) / sd;
    cv[feats[i].label] += (feats[i].var - mv) / sv;
    ++cn[feats[i].label];
  }
  int correct = 0, total = 0;
  for (std::size_t i = 1; i < feats.size(); i += 2) {
    const double x = (feats[i].d - md) / sd, y = (feats[i].var - mv) / sv;
    int best = 0;
    double best_d = 1e300;
    for (int k = 0; k < 4; ++k) {
      const double dd = std::hypot(x - cd[k] / cn[k], y - cv[k] / cn[k]);
      if (dd < best_d) {
        best_d = dd;
        best = k;
      }
    }
    correct += best == feats[i].label;
    ++total;
  }
  CHECK(static_cast<double>(correct) / total >= 0.85);
}

TEST_CASE("stratified split") {
  std::vector<int> labels;
  for (int k = 0; k < 4; ++k)
    for (int i = 0; i < 100; ++i) labels.push_back(k);
  const auto s = stratified_split(labels, 3);
  CHECK(s.train.size() == 280);
  CHECK(s.validation.size() == 80);
  CHECK(s.test.size() == 40);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.validation.begin(), s.validation.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == 400);
  int per_class_test[4] = {};
  for (auto i : s.test) ++per_class_test[labels[i]];
  for (int k = 0; k < 4; ++k) CHECK(per_class_test[k] == 10);
  const auto s2 = stratified_split(labels, 4);
  CHECK(s2.test != s.test);
}

TEST_CASE("frames and segmentation recall") {
  const auto specs = default_specs();
  SUBCASE("single cell") {
    FrameConfig cfg;
    cfg.frames = 5;
    cfg.cells_per_frame = 1;
    const auto set = generate_frames(specs, cfg);
    const auto corrected = preprocess::subtract_background(set.frames, 5);
    for (const auto& f : corrected) CHECK(preprocess::segment(f).size() == 1);
  }
  SUBCASE("ten cells") {
    FrameConfig cfg;
    cfg.frames = 7;
    cfg.cells_per_frame = 10;
    cfg.seed = 8;
    const auto set = generate_frames(specs, cfg);
    CHECK(set.frames[0].height == 382);
    CHECK(set.frames[0].width == 512);
    const auto corrected = preprocess::subtract_background(set.frames, 7);
    int found = 0, planted = 0;
    for (std::size_t f = 0; f < corrected.size(); ++f) {
      const auto cs = preprocess::segment(corrected[f]);
      for (const auto& p : set.cells[f]) {
        ++planted;
        for (const auto& c : cs) {
          if (std::hypot(c.centroid_row - p.row, c.centroid_col - p.col) <= 3.0) {
            ++found;
            break;
          }
        }
      }
    }
    CHECK(planted == 70);
    CHECK(static_cast<double>(found) / planted >= 0.9);
  }
  SUBCASE("empty frames") {
    FrameConfig cfg;
    cfg.frames = 3;
    cfg.cells_per_frame = 0;
    const auto set = generate_frames(specs, cfg);
    for (const auto& f : preprocess::subtract_background(set.frames, 3)) CHECK(preprocess::segment(f).empty());
  }
}

TEST_CASE("OOD generators") {
  const auto specs = default_specs();
  SUBCASE("noise is uniform after normalization") {
    const auto noise = generate_ood(OodKind::noise, specs, 3, 17);
    for (const auto& img : noise) {
      const Image n = preprocess::normalize(img);
      std::vector<double> bins(10, 0.0);
      for (double v : n.pixels) bins[std::min<std::size_t>(9, static_cast<std::size_t>(v * 10))] += 1.0;
      const double expected = n.size() / 10.0;
      double chi2 = 0.0;
      for (double b : bins) chi2 += (b - expected) * (b - expected) / expected;
      CHECK(stats::chi_square_sf(chi2, 9) > 0.01);
    }
  }
  SUBCASE("erythrocytes have a central dip") {
    for (const auto& img : generate_ood(OodKind::erythrocyte_like, specs, 10, 5)) {
      double centre = 0.0, ring = 0.0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) centre += img.at(24 + dy, 24 + dx) / 9.0;
      for (int k = 0; k < 16; ++k) {
        const double a = k * std::numbers::pi / 8;
        ring += img.at(static_cast<std::size_t>(std::lround(24.5 + 9 * std::sin(a))),
                       static_cast<std::size_t>(std::lround(24.5 + 9 * std::cos(a)))) / 16.0;
      }
      CHECK(centre < ring);
    }
  }
  SUBCASE("ruptured cells fail circularity more often than defocused ones") {
    auto fail_rate = [&](OodKind kind, double& mean_c) {
      const auto imgs = generate_ood(kind, specs, 40, 13);
      int fails = 0;
      mean_c = 0.0;
      for (const auto& img : imgs) {
        const auto ct = main_contour(img);
        REQUIRE(ct.has_value());
        const auto f = preprocess::morph_features(*ct, img);
        mean_c += f.circularity / imgs.size();
        fails += f.circularity < 0.85;
      }
      return static_cast<double>(fails) / imgs.size();
    };
    double c_rup = 0, c_def = 0;
    const double rup = fail_rate(OodKind::ruptured, c_rup);
    const double def = fail_rate(OodKind::defocused, c_def);
    CHECK(c_rup < 0.85);
    CHECK(def < rup);
  }
  SUBCASE("digit glyphs span the normalized range") {
    for (const auto& img : generate_ood(OodKind::digit_like, specs, 10, 2)) {
      const Image n = preprocess::normalize(img);
      CHECK(n.min() == 0.0);
      CHECK(n.max() == 1.0);
    }
  }
  SUBCASE("aggregates are larger than single cells") {
    for (const auto& img : generate_ood(OodKind::aggregate, specs, 10, 2)) {
      const auto ct = main_contour(img);
      REQUIRE(ct.has_value());
      CHECK(ct->pixel_count() > 400);
    }
  }
  SUBCASE("deterministic") {
    for (auto kind : all_ood_kinds()) {
      const auto a = generate_ood(kind, specs, 4, 99), b = generate_ood(kind, specs, 4, 99);
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].pixels == b[i].pixels);
      CHECK(ood_kind_from_string(to_string(kind)) == kind);
    }
    CHECK_THROWS_AS(ood_kind_from_string("mnist"), ConfigError);
  }
}

TEST_CASE("IDX reader") {
  const auto path = std::filesystem::temp_directory_path() / "qpi_test_idx.bin";
  {
    std::ofstream out(path, std::ios::binary);
    const unsigned char header[] = {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3};
    out.write(reinterpret_cast<const char*>(header), sizeof header);
    const unsigned char px[] = {0, 255, 51, 0, 0, 0, 10, 20, 30, 40, 50, 60};
    out.write(reinterpret_cast<const char*>(px), sizeof px);
  }
  const auto imgs = read_idx_images(path);
  REQUIRE(imgs.size() == 2);
  CHECK(imgs[0].height == 2);
  CHECK(imgs[0].width == 3);
  const Image n = preprocess::normalize(imgs[0]);
  CHECK(n.pixels[1] == doctest::Approx(1.0));
  CHECK(n.pixels[2] == doctest::Approx(0.2));
  CHECK(read_idx_images(path, 1).size() == 1);
  {
    std::ofstream bad(path, std::ios::binary);
    const unsigned char header[] = {0, 0, 8, 1, 0, 0, 0, 0};
    bad.write(reinterpret_cast<const char*>(header), sizeof header);
  }
  CHECK_THROWS_AS(read_idx_images(path), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("planted label noise") {
  std::vector<int> labels(500);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 4);
  const auto original = labels;
  const auto flipped = plant_label_noise(labels, 4, 0.02, 7);
  CHECK(flipped.size() == 10);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) changed += labels[i] != original[i];
  CHECK(changed == 10);
  for (auto i : flipped) CHECK(labels[i] != original[i]);
}
