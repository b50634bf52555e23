#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "contour_corpus.hpp"
#include "qpi/error.hpp"
#include "qpi/preprocess.hpp"
#include "qpi/rng.hpp"

using namespace qpi;
using namespace qpi::preprocess;

namespace {

std::set<std::pair<int, int>> as_set(const std::vector<Pixel>& px) {
  std::set<std::pair<int, int>> s;
  for (const auto& p : px) s.insert({p.row, p.col});
  return s;
}

Image disk(std::size_t h, std::size_t w, double cy, double cx, double r, double value) {
  Image img(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (std::hypot(y - cy, x - cx) <= r) img.at(y, x) = value;
    }
  }
  return img;
}

}  // namespace

TEST_CASE("background median subtraction") {
  SUBCASE("identical stack leaves zero residual") {
    std::vector<Image> frames(100, Image(4, 5, 1.3));
    for (const auto& f : subtract_background(frames, 100)) {
      for (double v : f.pixels) CHECK(v == 0.0);
    }
  }
  SUBCASE("additive blob survives") {
    std::vector<Image> frames(100, Image(6, 6, 1.0));
    frames[7].at(2, 3) = 3.0;
    const auto out = subtract_background(frames, 100);
    CHECK(out[7].at(2, 3) == doctest::Approx(2.0));
    CHECK(out[7].at(0, 0) == 0.0);
  }
  SUBCASE("median ignores a single outlier") {
    std::vector<Image> frames(100, Image(3, 3, 1.0));
    frames[50].at(1, 1) = 10.0;
    const auto out = subtract_background(frames, 100);
    CHECK(out[0].at(1, 1) == 0.0);
    CHECK(out[50].at(1, 1) == doctest::Approx(9.0));
  }
  SUBCASE("negatives clamp to zero") {
    std::vector<Image> frames(3, Image(2, 2, 1.0));
    frames[1].at(0, 0) = 0.2;
    CHECK(subtract_background(frames, 3)[1].at(0, 0) == 0.0);
  }
  SUBCASE("short stack uses every frame") {
    std::vector<Image> frames = {Image(1, 1, 1.0), Image(1, 1, 2.0), Image(1, 1, 4.0), Image(1, 1, 8.0)};
    const auto out = subtract_background(frames, 100);
    CHECK(out[3].at(0, 0) == doctest::Approx(5.0));  // median 3
  }
  CHECK_THROWS_AS(subtract_background(std::vector<Image>{}, 100), DataError);
}

TEST_CASE("golden contour corpus") {
  const auto cases = golden::corpus();
  REQUIRE(cases.size() == 20);
  for (const auto& c : cases) {
    CAPTURE(c.name);
    const int h = static_cast<int>(c.rows.size()), w = static_cast<int>(c.rows[0].size());
    const auto mask = golden::to_mask(c.rows);
    const auto contours = find_contours(mask, h, w);
    REQUIRE(contours.size() == c.contours.size());
    const auto ref = golden::reference_contours(mask, h, w);
    REQUIRE(ref.size() == c.contours.size());
    for (std::size_t k = 0; k < contours.size(); ++k) {
      CHECK(contours[k].pixel_count() == c.contours[k].area);
      CHECK(as_set(contours[k].border).size() == c.contours[k].border_size);
      CHECK(as_set(contours[k].border) == ref[k].border);
      CHECK(as_set(contours[k].region) == ref[k].region);
    }
  }
}

TEST_CASE("3x3 block border order") {
  const auto mask = golden::to_mask({".....", ".###.", ".###.", ".###.", "....."});
  const auto contours = find_contours(mask, 5, 5);
  REQUIRE(contours.size() == 1);
  const std::vector<Pixel> expected = {{1, 1}, {2, 1}, {3, 1}, {3, 2}, {3, 3}, {2, 3}, {1, 3}, {1, 2}};
  CHECK(contours[0].border == expected);
  CHECK(border_length(contours[0].border) == doctest::Approx(8.0));
}

TEST_CASE("random masks agree with the reference extractor") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int h = 5 + static_cast<int>(rng.below(25)), w = 5 + static_cast<int>(rng.below(25));
    const double density = rng.uniform(0.2, 0.7);
    std::vector<unsigned char> mask(h * w);
    for (auto& m : mask) m = rng.bernoulli(density) ? 1 : 0;
    const auto contours = find_contours(mask, h, w);
    const auto ref = golden::reference_contours(mask, h, w);
    REQUIRE(contours.size() == ref.size());
    for (std::size_t k = 0; k < ref.size(); ++k) {
      CHECK(as_set(contours[k].border) == ref[k].border);
      CHECK(as_set(contours[k].region) == ref[k].region);
    }
  }
}

TEST_CASE("segment") {
  CHECK(segment(Image(20, 20, 0.0)).empty());
  Image frame(20, 20);
  for (int r = 5; r < 8; ++r)
    for (int c = 5; c < 8; ++c) frame.at(r, c) = 1.0;
  auto one = segment(frame, 0.2, 1);
  REQUIRE(one.size() == 1);
  CHECK(one[0].pixel_count() == 9);
  CHECK(segment(frame, 0.2, 12).empty());  // below the default area floor
  for (int r = 12; r < 16; ++r)
    for (int c = 12; c < 16; ++c) frame.at(r, c) = 1.0;
  CHECK(segment(frame, 0.2, 1).size() == 2);
  SUBCASE("threshold is strict") {
    Image f(5, 5, 0.2);
    CHECK(segment(f, 0.2, 1).empty());
  }
}

TEST_CASE("segmentation is translation equivariant") {
  Rng rng(3);
  Image base(40, 40);
  for (int k = 0; k < 6; ++k) {
    const double cy = rng.uniform(8, 32), cx = rng.uniform(8, 32), r = rng.uniform(1.5, 5);
    const Image d = disk(40, 40, cy, cx, r, 1.0);
    for (std::size_t i = 0; i < base.size(); ++i) base.pixels[i] = std::max(base.pixels[i], d.pixels[i]);
  }
  const int dy = 5, dx = -3;
  Image shifted(50, 50);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x) shifted.at(y + dy + 2, x + dx + 6) = base.at(y, x);
  const auto a = segment(base, 0.2, 1);
  const auto b = segment(shifted, 0.2, 1);
  REQUIRE(a.size() == b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    REQUIRE(a[k].border.size() == b[k].border.size());
    for (std::size_t i = 0; i < a[k].border.size(); ++i) {
      CHECK(b[k].border[i].row == a[k].border[i].row + dy + 2);
      CHECK(b[k].border[i].col == a[k].border[i].col + dx + 6);
    }
  }
}

TEST_CASE("extract_patch") {
  Image frame(100, 120);
  for (int r = 40; r < 43; ++r)
    for (int c = 60; c < 63; ++c) frame.at(r, c) = 2.0;
  auto contours = segment(frame, 0.2, 1);
  REQUIRE(contours.size() == 1);
  CHECK(contours[0].centroid_row == doctest::Approx(41.0));
  CHECK(contours[0].centroid_col == doctest::Approx(61.0));
  const Image p = extract_patch(frame, contours[0]);
  CHECK(p.height == 50);
  CHECK(p.width == 50);
  CHECK(p.at(25, 25) == 2.0);
  CHECK(p.at(24, 24) == 2.0);
  CHECK(p.at(26, 26) == 2.0);
  CHECK(p.at(23, 25) == 0.0);

  Image corner(100, 120);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) corner.at(r, c) = 1.0;
  const auto cc = segment(corner, 0.2, 1);
  const Image q = extract_patch(corner, cc[0]);
  CHECK(q.at(25, 25) == 1.0);
  CHECK(q.at(0, 0) == 0.0);   // padded
  CHECK(q.at(23, 23) == 0.0); // padded (frame row -1)
  CHECK(q.at(24, 24) == 1.0);
}

TEST_CASE("morphological features") {
  SUBCASE("equivalent diameter") {
    MorphFeatures f;
    f.area = 16.0 * std::numbers::pi;
    CHECK(std::sqrt(4.0 * f.area / std::numbers::pi) == doctest::Approx(8.0));
  }
  SUBCASE("optical volume of two pi-phase pixels") {
    const std::vector<double> phi = {std::numbers::pi, std::numbers::pi};
    // 2 pi rad of phase at 528 nm is 0.528 um of optical path over 1 um^2.
    CHECK(optical_volume(phi, 1.0, 0.528) == doctest::Approx(0.528).epsilon(1e-12));
    CHECK(optical_volume(phi, 0.5, 0.528) == doctest::Approx(0.132).epsilon(1e-12));
  }
  SUBCASE("rasterized disks") {
    Rng rng(5);
    for (int r = 10; r <= 40; r += 3) {
      const double cy = 60 + rng.uniform(-0.5, 0.5), cx = 60 + rng.uniform(-0.5, 0.5);
      const Image img = disk(120, 120, cy, cx, r, 1.0);
      const auto cs = segment(img, 0.2, 12);
      REQUIRE(cs.size() == 1);
      const auto f = morph_features(cs[0], img, 1.0);
      CAPTURE(r);
      CHECK(f.circularity >= 0.85);
      CHECK(f.circularity <= 1.05);
      CHECK(std::abs(f.diameter - 2.0 * r) / (2.0 * r) <= 0.05);
      CHECK(f.area == doctest::Approx(static_cast<double>(f.pixel_count)));
    }
  }
  SUBCASE("units follow the pixel pitch") {
    const Image img = disk(60, 60, 30, 30, 12, 1.5);
    const auto cs = segment(img, 0.2, 12);
    const auto a = morph_features(cs[0], img, 1.0);
    const auto b = morph_features(cs[0], img, 0.2);
    CHECK(b.area == doctest::Approx(a.area * 0.04));
    CHECK(b.diameter == doctest::Approx(a.diameter * 0.2));
    CHECK(b.perimeter == doctest::Approx(a.perimeter * 0.2));
    CHECK(b.circularity == doctest::Approx(a.circularity));
    CHECK(a.volume == doctest::Approx(1.5 * a.pixel_count * 0.528 / (2 * std::numbers::pi)));
  }
  SUBCASE("degenerate contours") {
    Contour c;
    c.border = {{0, 0}, {0, 1}};
    c.region = {{0, 0}, {0, 1}};
    CHECK_THROWS_AS(morph_features(c, Image(3, 3), 1.0), DomainError);
  }
}

TEST_CASE("keep_cell gate") {
  MorphFeatures f;
  f.diameter = 8.0;
  f.circularity = 0.95;
  CHECK(keep_cell(f));
  f.diameter = 3.9;
  f.circularity = 0.99;
  CHECK_FALSE(keep_cell(f));
  f.diameter = 10.0;
  f.circularity = 0.5;
  CHECK_FALSE(keep_cell(f));
  f.diameter = 4.0;
  f.circularity = 0.85;
  CHECK(keep_cell(f));
}

TEST_CASE("normalize") {
  const Image in(1, 4, std::vector<double>{0.1, 0.2, 4.0, 5.0});
  const Image out = normalize(in);
  CHECK(out.pixels == std::vector<double>{0.0, 0.0, 1.0, 1.0});
  const Image c = normalize(Image(3, 3, 2.1));
  for (double v : c.pixels) CHECK(v == doctest::Approx(0.5));
  SUBCASE("idempotent after mapping back to the clip range") {
    Rng rng(2);
    Image x(10, 10);
    for (double& v : x.pixels) v = rng.uniform(-1.0, 6.0);
    const Image n1 = normalize(x);
    Image back = n1;
    for (double& v : back.pixels) v = 0.2 + 3.8 * v;
    const Image n2 = normalize(back);
    for (std::size_t i = 0; i < n1.size(); ++i) CHECK(n2.pixels[i] == doctest::Approx(n1.pixels[i]).epsilon(1e-12));
  }
}

TEST_CASE("process_frames end to end") {
  std::vector<Image> frames;
  for (int k = 0; k < 5; ++k) {
    Image f(80, 100, 0.5);
    if (k == 2) {
      const Image d = disk(80, 100, 40, 50, 14, 1.5);
      for (std::size_t i = 0; i < f.size(); ++i) f.pixels[i] += d.pixels[i];
    }
    frames.push_back(f);
  }
  PreprocessConfig cfg;
  cfg.background_window = 5;
  const auto cells = process_frames(frames, cfg);
  REQUIRE(cells.size() == 1);
  CHECK(cells[0].frame == 2);
  CHECK(cells[0].keep);
  CHECK(cells[0].patch.height == 50);
  CHECK(cells[0].patch.at(25, 25) == doctest::Approx((1.5 - 0.2) / 3.8));
  std::ostringstream csv;
  write_feature_csv(csv, cells);
  CHECK(csv.str().rfind("frame,contour,P,A,d,V,L,C,keep\n", 0) == 0);
}
