#include "qpi/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <ostream>
#include <spdlog/spdlog.h>

#include "qpi/error.hpp"
#include "qpi/parallel.hpp"
#include "qpi/rng.hpp"

namespace qpi::synth {
namespace {

constexpr double kPi = std::numbers::pi;

struct Granule {
  double dy, dx, amp, sigma;
};

struct CellShape {
  double radius;  // mean semi-axis
  double aspect;  // major / minor
  double angle;
  double height;
  double ring;
  double nucleus;
  double nucleus_dy, nucleus_dx;
  std::vector<Granule> granules;

  double extent() const { return radius * std::sqrt(aspect); }
};

CellShape sample_shape(const SynthClassSpec& spec, Rng& rng) {
  CellShape s;
  // Truncated at 2.5 sd so size classes keep a hard floor.
  const double z = std::clamp(rng.normal(), -2.5, 2.5);
  s.radius = std::max(5.0, spec.radius_mean + spec.radius_sd * z);
  s.aspect = 1.0 + rng.uniform(0.0, 0.12);
  s.angle = rng.uniform(0.0, kPi);
  s.height = std::max(0.6, rng.normal(spec.phase_height, spec.phase_sd));
  s.ring = spec.ring_contrast;
  s.nucleus = spec.nucleus_contrast;
  const double na = rng.uniform(0.0, 2.0 * kPi), nr = rng.uniform(0.0, 0.2 * s.radius);
  s.nucleus_dy = nr * std::sin(na);
  s.nucleus_dx = nr * std::cos(na);
  for (std::size_t g = 0; g < spec.granules; ++g) {
    const double a = rng.uniform(0.0, 2.0 * kPi);
    const double r = 0.75 * s.radius * std::sqrt(rng.uniform());
    s.granules.push_back({r * std::sin(a), r * std::cos(a), spec.texture_amplitude * rng.uniform(0.5, 1.0),
                          rng.uniform(1.0, 1.4)});
  }
  return s;
}

// Normalised elliptic radius: 1 on the cell edge.
double edge_coordinate(const CellShape& s, double dy, double dx) {
  const double c = std::cos(s.angle), sn = std::sin(s.angle);
  const double u = c * dx + sn * dy, v = -sn * dx + c * dy;
  const double ra = s.radius * std::sqrt(s.aspect), rb = s.radius / std::sqrt(s.aspect);
  return std::sqrt((u / ra) * (u / ra) + (v / rb) * (v / rb));
}

void render_shape(Image& img, const CellShape& s, double cy, double cx) {
  const double reach = s.extent() + 2.0;
  const long r0 = std::max(0L, static_cast<long>(std::floor(cy - reach)));
  const long r1 = std::min(static_cast<long>(img.height) - 1, static_cast<long>(std::ceil(cy + reach)));
  const long c0 = std::max(0L, static_cast<long>(std::floor(cx - reach)));
  const long c1 = std::min(static_cast<long>(img.width) - 1, static_cast<long>(std::ceil(cx + reach)));
  const double nuc_sigma = 0.35 * s.radius;
  for (long r = r0; r <= r1; ++r) {
    for (long c = c0; c <= c1; ++c) {
      const double dy = static_cast<double>(r) - cy, dx = static_cast<double>(c) - cx;
      const double q = edge_coordinate(s, dy, dx);
      if (q >= 1.0) continue;
      double v = s.height * std::sqrt(1.0 - q * q);
      const double ring_dist = (q - 0.85) * s.radius;
      v += s.ring * std::exp(-ring_dist * ring_dist / (2.0 * 1.2 * 1.2));
      if (s.nucleus != 0.0) {
        const double ny = dy - s.nucleus_dy, nx = dx - s.nucleus_dx;
        v += s.nucleus * std::exp(-(ny * ny + nx * nx) / (2.0 * nuc_sigma * nuc_sigma));
      }
      for (const auto& g : s.granules) {
        const double gy = dy - g.dy, gx = dx - g.dx;
        v += g.amp * std::exp(-(gy * gy + gx * gx) / (2.0 * g.sigma * g.sigma));
      }
      img.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) += v;
    }
  }
}

void add_noise(Image& img, double sd, Rng& rng) {
  for (double& v : img.pixels) v = std::max(0.0, v + rng.normal(0.0, sd));
}

Image gaussian_blur(const Image& src, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[static_cast<std::size_t>(i + radius)];
  }
  for (double& v : k) v /= sum;
  const long h = static_cast<long>(src.height), w = static_cast<long>(src.width);
  Image tmp(src.height, src.width), out(src.height, src.width);
  for (long r = 0; r < h; ++r) {
    for (long c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const long cc = c + i;
        if (cc >= 0 && cc < w) acc += k[static_cast<std::size_t>(i + radius)] * src.at(r, cc);
      }
      tmp.at(r, c) = acc;
    }
  }
  for (long r = 0; r < h; ++r) {
    for (long c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const long rr = r + i;
        if (rr >= 0 && rr < h) acc += k[static_cast<std::size_t>(i + radius)] * tmp.at(rr, c);
      }
      out.at(r, c) = acc;
    }
  }
  return out;
}

double segment_distance(double py, double px, double ay, double ax, double by, double bx) {
  const double vy = by - ay, vx = bx - ax;
  const double len2 = vy * vy + vx * vx;
  double t = len2 > 0.0 ? ((py - ay) * vy + (px - ax) * vx) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(py - (ay + t * vy), px - (ax + t * vx));
}

// Stroke skeletons for ten digit-like glyphs on a unit box (x right, y down).
using Stroke = std::array<double, 4>;  // y0, x0, y1, x1
const std::vector<std::vector<Stroke>>& glyphs() {
  static const std::vector<std::vector<Stroke>> g = {
      {{0, .2, 0, .8}, {0, .8, 1, .8}, {1, .8, 1, .2}, {1, .2, 0, .2}},
      {{.15, .35, 0, .55}, {0, .55, 1, .55}, {1, .3, 1, .8}},
      {{0, .2, 0, .8}, {0, .8, .5, .8}, {.5, .8, 1, .2}, {1, .2, 1, .8}},
      {{0, .2, 0, .8}, {0, .8, 1, .8}, {.5, .35, .5, .8}, {1, .2, 1, .8}},
      {{0, .2, .55, .2}, {.55, .2, .55, .85}, {0, .65, 1, .65}},
      {{0, .8, 0, .2}, {0, .2, .45, .2}, {.45, .2, .45, .8}, {.45, .8, 1, .8}, {1, .8, 1, .2}},
      {{0, .75, .5, .2}, {.5, .2, 1, .2}, {1, .2, 1, .8}, {1, .8, .55, .8}, {.55, .8, .55, .2}},
      {{0, .2, 0, .8}, {0, .8, 1, .4}},
      {{0, .2, 0, .8}, {0, .8, 1, .8}, {1, .8, 1, .2}, {1, .2, 0, .2}, {.5, .2, .5, .8}},
      {{.5, .8, .5, .2}, {.5, .2, 0, .2}, {0, .2, 0, .8}, {0, .8, 1, .8}},
  };
  return g;
}

Image digit_patch(std::size_t extent, Rng& rng) {
  const auto& strokes = glyphs()[rng.below(10)];
  const double size = rng.uniform(0.5, 0.7) * static_cast<double>(extent);
  const double width = size * rng.uniform(0.55, 0.75);
  const double half_thick = rng.uniform(1.6, 2.4);
  const double top = 0.5 * static_cast<double>(extent) - 0.5 * size + rng.uniform(-2.0, 2.0);
  const double left = 0.5 * static_cast<double>(extent) - 0.5 * width + rng.uniform(-2.0, 2.0);
  const double shear = rng.uniform(-0.2, 0.2);
  Image img(extent, extent);
  for (std::size_t r = 0; r < extent; ++r) {
    for (std::size_t c = 0; c < extent; ++c) {
      double d = 1e9;
      for (const auto& s : strokes) {
        const double ay = top + s[0] * size, by = top + s[2] * size;
        const double ax = left + s[1] * width + shear * (s[0] - 0.5) * size;
        const double bx = left + s[3] * width + shear * (s[2] - 0.5) * size;
        d = std::min(d, segment_distance(static_cast<double>(r), static_cast<double>(c), ay, ax, by, bx));
      }
      const double v = std::clamp(half_thick + 0.5 - d, 0.0, 1.0);
      img.at(r, c) = 0.2 + 3.8 * v;
    }
  }
  return img;
}

std::uint32_t read_be32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw DataError("IDX file truncated in header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

}  // namespace

std::vector<SynthClassSpec> default_specs() {
  // name, radius mean/sd, texture amp, granules, ring, height/sd, nucleus
  return {
      {"Monocyte", 19.0, 1.2, 0.10, 6, 0.15, 1.7, 0.15, 0.6},
      {"Lymphocyte", 12.0, 0.6, 0.0, 0, 0.10, 2.2, 0.15, 0.0},
      {"Neutrophil", 15.0, 1.0, 0.15, 8, 0.20, 1.9, 0.15, 0.0},
      {"Eosinophil", 15.0, 1.0, 0.60, 30, 0.20, 1.9, 0.15, 0.0},
  };
}

double render_cell(Image& img, const SynthClassSpec& spec, double cy, double cx, std::uint64_t seed) {
  Rng rng(seed);
  const CellShape s = sample_shape(spec, rng);
  render_shape(img, s, cy, cx);
  return s.extent();
}

std::vector<Sample> generate_corpus(std::span<const SynthClassSpec> specs, const CorpusConfig& config) {
  if (specs.empty()) throw ConfigError("corpus needs at least one class spec");
  if (config.per_class < 1) throw ConfigError("corpus needs at least one sample per class");
  const std::size_t n = specs.size() * config.per_class;
  std::vector<Sample> out(n);
  parallel_for(n, [&](std::size_t i) {
    const std::size_t k = i / config.per_class, j = i % config.per_class;
    Rng rng(derive_seed(config.seed, {0x434f52, k, j}));
    Image img(config.extent, config.extent);
    const double centre = 0.5 * static_cast<double>(config.extent) - 0.5;
    const CellShape s = sample_shape(specs[k], rng);
    render_shape(img, s, centre + rng.uniform(-1.5, 1.5), centre + rng.uniform(-1.5, 1.5));
    add_noise(img, config.noise_sd, rng);
    out[i].id = specs[k].name.substr(0, 3) + "_" + std::to_string(j);
    out[i].label = static_cast<int>(k);
    out[i].phase = std::move(img);
  });
  return out;
}

Split stratified_split(std::span<const int> labels, std::uint64_t seed, double train_fraction,
                       double validation_fraction) {
  if (train_fraction < 0 || validation_fraction < 0 || train_fraction + validation_fraction > 1.0) {
    throw ConfigError("split fractions must be non-negative and sum to at most 1");
  }
  int classes = 0;
  for (int l : labels) classes = std::max(classes, l + 1);
  Split split;
  for (int k = 0; k < classes; ++k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == k) idx.push_back(i);
    }
    Rng rng(derive_seed(seed, {0x53504c, static_cast<std::uint64_t>(k)}));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    const auto n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * n));
    const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(validation_fraction * n)));
    split.train.insert(split.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.validation.insert(split.validation.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                            idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    split.test.insert(split.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.validation.begin(), split.validation.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

FrameSet generate_frames(std::span<const SynthClassSpec> specs, const FrameConfig& config) {
  if (specs.empty()) throw ConfigError("frames need at least one class spec");
  FrameSet set;
  Image background(config.height, config.width);
  for (std::size_t r = 0; r < config.height; ++r) {
    for (std::size_t c = 0; c < config.width; ++c) {
      background.at(r, c) = config.background_level *
                            (0.5 + 0.25 * std::sin(2.0 * kPi * c / 173.0) + 0.25 * std::cos(2.0 * kPi * r / 131.0));
    }
  }
  for (std::size_t f = 0; f < config.frames; ++f) {
    Rng rng(derive_seed(config.seed, {0x46524d, f}));
    Image frame = background;
    std::vector<PlantedCell> planted;
    std::vector<CellShape> shapes;
    for (std::size_t k = 0; k < config.cells_per_frame; ++k) {
      const int label = static_cast<int>(rng.below(specs.size()));
      const CellShape s = sample_shape(specs[static_cast<std::size_t>(label)], rng);
      const double reach = s.extent();
      bool placed = false;
      for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
        const double cy = rng.uniform(reach + 2.0, static_cast<double>(config.height) - reach - 3.0);
        const double cx = rng.uniform(reach + 2.0, static_cast<double>(config.width) - reach - 3.0);
        bool clear = true;
        for (const auto& p : planted) {
          if (std::hypot(cy - p.row, cx - p.col) < reach + p.radius + 4.0) {
            clear = false;
            break;
          }
        }
        if (clear) {
          planted.push_back({cy, cx, reach, label});
          shapes.push_back(s);
          placed = true;
        }
      }
      if (!placed) {
        spdlog::warn("frame {}: placed {} of {} cells", f, planted.size(), config.cells_per_frame);
        break;
      }
    }
    for (std::size_t k = 0; k < planted.size(); ++k) render_shape(frame, shapes[k], planted[k].row, planted[k].col);
    add_noise(frame, config.noise_sd, rng);
    set.frames.push_back(std::move(frame));
    set.cells.push_back(std::move(planted));
  }
  return set;
}

std::string_view to_string(OodKind kind) {
  switch (kind) {
    case OodKind::erythrocyte_like: return "erythrocyte_like";
    case OodKind::defocused: return "defocused";
    case OodKind::aggregate: return "aggregate";
    case OodKind::ruptured: return "ruptured";
    case OodKind::digit_like: return "digit_like";
    case OodKind::noise: return "noise";
  }
  return "unknown";
}

OodKind ood_kind_from_string(std::string_view name) {
  for (OodKind k : all_ood_kinds()) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown OOD kind '" + std::string(name) + "'");
}

std::vector<OodKind> all_ood_kinds() {
  return {OodKind::erythrocyte_like, OodKind::defocused, OodKind::aggregate,
          OodKind::ruptured, OodKind::digit_like, OodKind::noise};
}

std::vector<Image> generate_ood(OodKind kind, std::span<const SynthClassSpec> specs, std::size_t n,
                                std::uint64_t seed, std::size_t extent) {
  if (specs.empty() && kind != OodKind::noise && kind != OodKind::digit_like && kind != OodKind::erythrocyte_like) {
    throw ConfigError("OOD kind needs class specs");
  }
  std::vector<Image> out(n);
  const double centre = 0.5 * static_cast<double>(extent) - 0.5;
  parallel_for(n, [&](std::size_t i) {
    Rng rng(derive_seed(seed, {0x4f4f44, static_cast<std::uint64_t>(kind), i}));
    Image img(extent, extent);
    switch (kind) {
      case OodKind::noise:
        for (double& v : img.pixels) v = 0.2 + 3.8 * rng.uniform();
        break;
      case OodKind::digit_like:
        img = digit_patch(extent, rng);
        break;
      case OodKind::erythrocyte_like: {
        const double r = std::max(6.0, rng.normal(13.0, 1.0));
        const double h = std::max(0.6, rng.normal(1.3, 0.1));
        const double cy = centre + rng.uniform(-1.5, 1.5), cx = centre + rng.uniform(-1.5, 1.5);
        for (std::size_t y = 0; y < extent; ++y) {
          for (std::size_t x = 0; x < extent; ++x) {
            const double q = std::hypot(y - cy, x - cx) / r;
            if (q >= 1.0) continue;
            const double dip = q < 0.7 ? 0.35 + 0.65 * (q / 0.7) * (q / 0.7) : 1.0;
            img.at(y, x) = h * std::sqrt(1.0 - q * q) * dip;
          }
        }
        add_noise(img, 0.02, rng);
        break;
      }
      case OodKind::defocused: {
        const auto& spec = specs[rng.below(specs.size())];
        render_shape(img, sample_shape(spec, rng), centre + rng.uniform(-1.5, 1.5), centre + rng.uniform(-1.5, 1.5));
        img = gaussian_blur(img, rng.uniform(2.5, 4.0));
        add_noise(img, 0.02, rng);
        break;
      }
      case OodKind::aggregate: {
        const CellShape a = sample_shape(specs[rng.below(specs.size())], rng);
        const CellShape b = sample_shape(specs[rng.below(specs.size())], rng);
        const double sep = (a.radius + b.radius) * rng.uniform(0.55, 0.8);
        const double ang = rng.uniform(0.0, 2.0 * kPi);
        const double oy = 0.5 * sep * std::sin(ang), ox = 0.5 * sep * std::cos(ang);
        render_shape(img, a, centre - oy, centre - ox);
        render_shape(img, b, centre + oy, centre + ox);
        add_noise(img, 0.02, rng);
        break;
      }
      case OodKind::ruptured: {
        const CellShape s = sample_shape(specs[rng.below(specs.size())], rng);
        const double cy = centre + rng.uniform(-1.5, 1.5), cx = centre + rng.uniform(-1.5, 1.5);
        render_shape(img, s, cy, cx);
        // Remove angular wedges reaching from the rim towards the centre.
        const std::size_t wedges = 2 + rng.below(3);
        std::vector<std::array<double, 3>> cuts;  // angle, half width, inner radius fraction
        for (std::size_t w = 0; w < wedges; ++w) {
          cuts.push_back({rng.uniform(0.0, 2.0 * kPi), rng.uniform(0.2, 0.4), rng.uniform(0.15, 0.45)});
        }
        for (std::size_t y = 0; y < extent; ++y) {
          for (std::size_t x = 0; x < extent; ++x) {
            const double dy = y - cy, dx = x - cx;
            const double ang = std::atan2(dy, dx);
            const double q = edge_coordinate(s, dy, dx);
            for (const auto& cut : cuts) {
              double d = std::remainder(ang - cut[0], 2.0 * kPi);
              if (std::abs(d) < cut[1] && q > cut[2]) {
                img.at(y, x) = 0.0;
                break;
              }
            }
          }
        }
        add_noise(img, 0.02, rng);
        break;
      }
    }
    out[i] = std::move(img);
  });
  return out;
}

std::vector<Image> read_idx_images(const std::filesystem::path& path, std::size_t limit) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open IDX file " + path.string());
  const std::uint32_t magic = read_be32(in);
  if (magic != 0x00000803) throw DataError("IDX magic mismatch in " + path.string());
  std::size_t count = read_be32(in);
  const std::size_t rows = read_be32(in), cols = read_be32(in);
  if (limit) count = std::min(count, limit);
  std::vector<Image> out;
  std::vector<unsigned char> buf(rows * cols);
  for (std::size_t i = 0; i < count; ++i) {
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw DataError("IDX file truncated at image " + std::to_string(i));
    Image img(rows, cols);
    for (std::size_t p = 0; p < buf.size(); ++p) img.pixels[p] = 0.2 + 3.8 * (buf[p] / 255.0);
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<std::size_t> plant_label_noise(std::vector<int>& labels, std::size_t classes, double fraction,
                                           std::uint64_t seed) {
  if (classes < 2) throw ConfigError("label noise needs at least two classes");
  const auto n_flip = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(labels.size())));
  std::vector<std::size_t> idx(labels.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(derive_seed(seed, {0x464c50}));
  for (std::size_t i = 0; i < n_flip; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
  idx.resize(n_flip);
  std::sort(idx.begin(), idx.end());
  for (std::size_t i : idx) {
    const auto shift = 1 + static_cast<int>(rng.below(classes - 1));
    labels[i] = (labels[i] + shift) % static_cast<int>(classes);
  }
  return idx;
}

void write_manifest(std::ostream& out, std::span<const Sample> samples, const Split& split) {
  std::vector<const char*> role(samples.size(), "");
  for (auto i : split.train) role[i] = "train";
  for (auto i : split.validation) role[i] = "validation";
  for (auto i : split.test) role[i] = "test";
  out << "id,label,split\n";
  for (std::size_t i = 0; i < samples.size(); ++i) out << samples[i].id << ',' << samples[i].label << ',' << role[i] << '\n';
}

}  // namespace qpi::synth
