#include "qpi/preprocess.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <ostream>
#include <spdlog/spdlog.h>

#include "qpi/error.hpp"
#include "qpi/parallel.hpp"

namespace qpi::preprocess {
namespace {

// Neighbour offsets in counter-clockwise order on screen (rows grow downward),
// starting east.
constexpr std::array<int, 8> kDr = {0, -1, -1, -1, 0, 1, 1, 1};
constexpr std::array<int, 8> kDc = {1, 1, 0, -1, -1, -1, 0, 1};

int direction(int dr, int dc) {
  for (int d = 0; d < 8; ++d) {
    if (kDr[d] == dr && kDc[d] == dc) return d;
  }
  return -1;
}

// Padded label grid with a zero frame so neighbour reads never leave it.
class Grid {
 public:
  Grid(std::size_t h, std::size_t w) : w_(static_cast<int>(w) + 2), cells_((h + 2) * (w + 2), 0) {}
  int& operator()(int r, int c) { return cells_[static_cast<std::size_t>(r * w_ + c)]; }

 private:
  int w_;
  std::vector<int> cells_;
};

}  // namespace

std::vector<Image> subtract_background(std::span<const Image> frames, std::size_t window) {
  if (frames.empty()) throw DataError("background subtraction needs at least one frame");
  const std::size_t h = frames[0].height, w = frames[0].width;
  for (const auto& f : frames) {
    if (f.height != h || f.width != w) throw DimensionError("background subtraction: frame extents differ");
  }
  std::size_t used = std::min(window, frames.size());
  if (used < window) spdlog::warn("background window {} exceeds {} frames, using all", window, frames.size());
  if (used == 0) used = frames.size();

  Image background(h, w);
  parallel_for(h, [&](std::size_t r) {
    std::vector<double> column(used);
    for (std::size_t c = 0; c < w; ++c) {
      for (std::size_t k = 0; k < used; ++k) column[k] = frames[k].at(r, c);
      const std::size_t mid = used / 2;
      std::nth_element(column.begin(), column.begin() + static_cast<std::ptrdiff_t>(mid), column.end());
      double med = column[mid];
      if (used % 2 == 0) {
        med = 0.5 * (med + *std::max_element(column.begin(), column.begin() + static_cast<std::ptrdiff_t>(mid)));
      }
      background.at(r, c) = med;
    }
  });

  std::vector<Image> out;
  out.reserve(frames.size());
  for (const auto& f : frames) {
    Image corrected(h, w);
    for (std::size_t i = 0; i < f.size(); ++i) corrected.pixels[i] = std::max(0.0, f.pixels[i] - background.pixels[i]);
    out.push_back(std::move(corrected));
  }
  return out;
}

std::vector<Contour> find_contours(const std::vector<unsigned char>& mask, std::size_t height, std::size_t width) {
  if (mask.size() != height * width) throw DimensionError("contour mask size does not match extents");
  const int H = static_cast<int>(height), W = static_cast<int>(width);
  Grid g(height, width);
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) g(r + 1, c + 1) = mask[static_cast<std::size_t>(r * W + c)] ? 1 : 0;
  }

  // Border 1 is the frame, treated as a hole border.
  std::vector<bool> is_hole = {false, true};
  std::vector<int> parent = {0, 0};
  struct Found {
    std::vector<Pixel> border;
  };
  std::vector<Found> outer;

  int nbd = 1;
  for (int i = 1; i <= H; ++i) {
    int lnbd = 1;
    for (int j = 1; j <= W; ++j) {
      const int v = g(i, j);
      int i2 = 0, j2 = 0;
      bool start = false, hole = false;
      if (v == 1 && g(i, j - 1) == 0) {
        start = true;
        i2 = i;
        j2 = j - 1;
      } else if (v >= 1 && g(i, j + 1) == 0) {
        start = true;
        hole = true;
        i2 = i;
        j2 = j + 1;
        if (v > 1) lnbd = v;
      }
      if (start) {
        ++nbd;
        is_hole.push_back(hole);
        const int p = (hole == is_hole[static_cast<std::size_t>(lnbd)]) ? parent[static_cast<std::size_t>(lnbd)] : lnbd;
        parent.push_back(p);
        const bool keep = !hole && p == 1;
        std::vector<Pixel> border;

        // Clockwise search around (i, j) starting at (i2, j2).
        const int d0 = direction(i2 - i, j2 - j);
        int i1 = 0, j1 = 0;
        bool found = false;
        for (int k = 0; k < 8; ++k) {
          const int d = ((d0 - k) % 8 + 8) % 8;
          if (g(i + kDr[d], j + kDc[d]) != 0) {
            i1 = i + kDr[d];
            j1 = j + kDc[d];
            found = true;
            break;
          }
        }
        if (!found) {
          g(i, j) = -nbd;
          border.push_back({i - 1, j - 1});
        } else {
          i2 = i1;
          j2 = j1;
          int i3 = i, j3 = j;
          while (true) {
            border.push_back({i3 - 1, j3 - 1});
            const int ds = direction(i2 - i3, j2 - j3);
            bool east_zero = false;
            int i4 = i2, j4 = j2;
            for (int k = 1; k <= 8; ++k) {
              const int d = (ds + k) % 8;
              const int rr = i3 + kDr[d], cc = j3 + kDc[d];
              if (g(rr, cc) != 0) {
                i4 = rr;
                j4 = cc;
                break;
              }
              if (d == 0) east_zero = true;
            }
            if (east_zero) {
              g(i3, j3) = -nbd;
            } else if (g(i3, j3) == 1) {
              g(i3, j3) = nbd;
            }
            if (i4 == i && j4 == j && i3 == i1 && j3 == j1) break;
            i2 = i3;
            j2 = j3;
            i3 = i4;
            j3 = j4;
          }
        }
        if (keep) outer.push_back({std::move(border)});
      }
      if (g(i, j) != 0 && g(i, j) != 1) lnbd = std::abs(g(i, j));
    }
  }

  // Filled regions: everything not reachable from the frame through
  // 4-connected background, grouped into 8-connected components.
  const std::size_t ph = height + 2, pw = width + 2;
  std::vector<int> state(ph * pw, 0);  // 0 unknown, 1 outside, 2+ component id
  auto fg = [&](std::size_t r, std::size_t c) {
    return r >= 1 && c >= 1 && r <= height && c <= width && mask[(r - 1) * width + (c - 1)];
  };
  std::vector<std::size_t> stack = {0};
  state[0] = 1;
  while (!stack.empty()) {
    const std::size_t idx = stack.back();
    stack.pop_back();
    const std::size_t r = idx / pw, c = idx % pw;
    const std::size_t nr[4] = {r - 1, r + 1, r, r};
    const std::size_t nc[4] = {c, c, c - 1, c + 1};
    for (int k = 0; k < 4; ++k) {
      if (nr[k] >= ph || nc[k] >= pw) continue;
      const std::size_t n = nr[k] * pw + nc[k];
      if (state[n] == 0 && !fg(nr[k], nc[k])) {
        state[n] = 1;
        stack.push_back(n);
      }
    }
  }

  std::vector<Contour> contours;
  contours.reserve(outer.size());
  int next_id = 2;
  for (auto& f : outer) {
    Contour ct;
    ct.border = std::move(f.border);
    const Pixel s = ct.border.front();
    const std::size_t seed = static_cast<std::size_t>(s.row + 1) * pw + static_cast<std::size_t>(s.col + 1);
    const int id = next_id++;
    state[seed] = id;
    stack = {seed};
    while (!stack.empty()) {
      const std::size_t idx = stack.back();
      stack.pop_back();
      const int r = static_cast<int>(idx / pw), c = static_cast<int>(idx % pw);
      ct.region.push_back({r - 1, c - 1});
      for (int d = 0; d < 8; ++d) {
        const int rr = r + kDr[d], cc = c + kDc[d];
        if (rr < 1 || cc < 1 || rr > H || cc > W) continue;
        const std::size_t n = static_cast<std::size_t>(rr) * pw + static_cast<std::size_t>(cc);
        if (state[n] == 0) {
          state[n] = id;
          stack.push_back(n);
        }
      }
    }
    std::sort(ct.region.begin(), ct.region.end(),
              [](const Pixel& a, const Pixel& b) { return a.row != b.row ? a.row < b.row : a.col < b.col; });
    double sr = 0.0, sc = 0.0;
    for (const auto& p : ct.region) {
      sr += p.row;
      sc += p.col;
    }
    ct.centroid_row = sr / static_cast<double>(ct.region.size());
    ct.centroid_col = sc / static_cast<double>(ct.region.size());
    contours.push_back(std::move(ct));
  }
  return contours;
}

std::vector<Contour> segment(const Image& frame, double threshold, std::size_t min_area) {
  std::vector<unsigned char> mask(frame.size());
  for (std::size_t i = 0; i < frame.size(); ++i) mask[i] = frame.pixels[i] > threshold ? 1 : 0;
  auto contours = find_contours(mask, frame.height, frame.width);
  std::erase_if(contours, [&](const Contour& c) { return c.pixel_count() < min_area; });
  return contours;
}

Image extract_patch(const Image& frame, const Contour& contour, std::size_t extent) {
  const long half = static_cast<long>(extent / 2);
  const long top = static_cast<long>(std::floor(contour.centroid_row + 0.5)) - half;
  const long left = static_cast<long>(std::floor(contour.centroid_col + 0.5)) - half;
  Image patch(extent, extent);
  for (std::size_t r = 0; r < extent; ++r) {
    const long fr = top + static_cast<long>(r);
    if (fr < 0 || fr >= static_cast<long>(frame.height)) continue;
    for (std::size_t c = 0; c < extent; ++c) {
      const long fc = left + static_cast<long>(c);
      if (fc < 0 || fc >= static_cast<long>(frame.width)) continue;
      patch.at(r, c) = frame.at(static_cast<std::size_t>(fr), static_cast<std::size_t>(fc));
    }
  }
  return patch;
}

double border_length(std::span<const Pixel> border) {
  if (border.size() < 2) return 0.0;
  double len = 0.0;
  for (std::size_t k = 0; k < border.size(); ++k) {
    const Pixel& a = border[k];
    const Pixel& b = border[(k + 1) % border.size()];
    len += std::hypot(static_cast<double>(a.row - b.row), static_cast<double>(a.col - b.col));
  }
  return len;
}

double optical_volume(std::span<const double> phases, double pixel_pitch, double wavelength) {
  double sum = 0.0;
  for (double p : phases) sum += p;
  return sum * wavelength / (2.0 * std::numbers::pi) * pixel_pitch * pixel_pitch;
}

MorphFeatures morph_features(const Contour& contour, const Image& frame, double pixel_pitch, double wavelength) {
  if (contour.border.size() < 3) throw DomainError("degenerate contour: fewer than 3 border points");
  const double len_px = border_length(contour.border);
  if (len_px <= 0.0) throw DomainError("degenerate contour: zero perimeter");
  MorphFeatures f;
  f.pixel_count = contour.pixel_count();
  f.area = static_cast<double>(f.pixel_count) * pixel_pitch * pixel_pitch;
  f.diameter = std::sqrt(4.0 * f.area / std::numbers::pi);
  std::vector<double> phases;
  phases.reserve(contour.region.size());
  for (const auto& p : contour.region) {
    phases.push_back(frame.at(static_cast<std::size_t>(p.row), static_cast<std::size_t>(p.col)));
  }
  f.volume = optical_volume(phases, pixel_pitch, wavelength);
  f.perimeter = (len_px + std::numbers::pi) * pixel_pitch;
  f.circularity = 4.0 * std::numbers::pi * f.area / (f.perimeter * f.perimeter);
  return f;
}

bool keep_cell(const MorphFeatures& f, double min_diameter, double min_circularity) {
  return f.diameter >= min_diameter && f.circularity >= min_circularity;
}

Image normalize(const Image& patch, double lo, double hi) {
  if (!(hi > lo)) throw DomainError("normalize needs hi > lo");
  Image out = patch;
  for (double& v : out.pixels) v = (std::clamp(v, lo, hi) - lo) / (hi - lo);
  return out;
}

std::vector<CellRecord> process_frames(std::span<const Image> frames, const PreprocessConfig& config) {
  const auto corrected = subtract_background(frames, config.background_window);
  std::vector<std::vector<CellRecord>> per_frame(corrected.size());
  parallel_for(corrected.size(), [&](std::size_t k) {
    const auto contours = segment(corrected[k], config.threshold, config.min_area);
    for (std::size_t c = 0; c < contours.size(); ++c) {
      if (contours[c].border.size() < 3) continue;
      CellRecord rec;
      rec.frame = k;
      rec.contour = c;
      rec.features = morph_features(contours[c], corrected[k], config.pixel_pitch, config.wavelength);
      rec.keep = keep_cell(rec.features, config.min_diameter, config.min_circularity);
      rec.patch = normalize(extract_patch(corrected[k], contours[c], config.patch_extent), config.clip_lo,
                            config.clip_hi);
      per_frame[k].push_back(std::move(rec));
    }
  });
  std::vector<CellRecord> out;
  for (auto& v : per_frame) {
    for (auto& r : v) out.push_back(std::move(r));
  }
  return out;
}

void write_feature_csv(std::ostream& out, std::span<const CellRecord> cells) {
  out << "frame,contour,P,A,d,V,L,C,keep\n";
  const auto old = out.precision(17);
  for (const auto& c : cells) {
    const auto& f = c.features;
    out << c.frame << ',' << c.contour << ',' << f.pixel_count << ',' << f.area << ',' << f.diameter << ','
        << f.volume << ',' << f.perimeter << ',' << f.circularity << ',' << (c.keep ? 1 : 0) << '\n';
  }
  out.precision(old);
}

}  // namespace qpi::preprocess
