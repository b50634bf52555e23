#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "qpi/image.hpp"

namespace qpi::preprocess {

struct Pixel {
  int row = 0;
  int col = 0;
  bool operator==(const Pixel&) const = default;
};

// Outer border of one 8-connected foreground component.
struct Contour {
  std::vector<Pixel> border;  // traversal order of the border following
  std::vector<Pixel> region;  // component pixels plus enclosed holes, row-major
  double centroid_row = 0.0;
  double centroid_col = 0.0;

  std::size_t pixel_count() const { return region.size(); }
};

struct MorphFeatures {
  std::size_t pixel_count = 0;
  double area = 0.0;         // um^2
  double diameter = 0.0;     // um, equivalent-area circle
  double volume = 0.0;       // um^3, phase-integrated
  double perimeter = 0.0;    // um
  double circularity = 0.0;  // 4 pi A / L^2
};

struct PreprocessConfig {
  std::size_t background_window = 100;
  double threshold = 0.2;        // rad, foreground is phase > threshold
  std::size_t min_area = 12;     // px, filled pixel count
  double pixel_pitch = 0.2;      // um per pixel
  double wavelength = 0.528;     // um
  double min_diameter = 4.0;     // um
  double min_circularity = 0.85;
  std::size_t patch_extent = 50;
  double clip_lo = 0.2;
  double clip_hi = 4.0;
};

// Per-pixel median of the first min(window, n) frames subtracted from every
// frame, negatives clamped to 0. Throws DataError on an empty sequence.
std::vector<Image> subtract_background(std::span<const Image> frames, std::size_t window = 100);

// Suzuki-Abe border following over the binary image (value > threshold),
// keeping only outermost borders. Components whose filled area is below
// min_area are dropped. Contours come out in raster order of their first pixel.
std::vector<Contour> find_contours(const std::vector<unsigned char>& mask, std::size_t height, std::size_t width);
std::vector<Contour> segment(const Image& frame, double threshold = 0.2, std::size_t min_area = 12);

// extent x extent crop with the centroid pixel at (extent/2, extent/2),
// zero outside the frame.
Image extract_patch(const Image& frame, const Contour& contour, std::size_t extent = 50);

// Closed polygonal length through the border pixel centres.
double border_length(std::span<const Pixel> border);

// The border runs through pixel centres, half a pixel inside the true cell
// edge; the perimeter adds the pi px that an outward offset of 0.5 px
// contributes to a closed curve. Throws DomainError for fewer than 3 border
// points or zero length.
MorphFeatures morph_features(const Contour& contour, const Image& frame, double pixel_pitch = 0.2,
                             double wavelength = 0.528);

// Phase-integrated volume sum(phi) * wavelength / (2 pi) * pitch^2.
double optical_volume(std::span<const double> phases, double pixel_pitch, double wavelength);

bool keep_cell(const MorphFeatures& f, double min_diameter = 4.0, double min_circularity = 0.85);

// Clip to [lo, hi] then map affinely onto [0, 1].
Image normalize(const Image& patch, double lo = 0.2, double hi = 4.0);

struct CellRecord {
  std::size_t frame = 0;
  std::size_t contour = 0;
  MorphFeatures features;
  bool keep = false;
  Image patch;  // normalized
};

// Background subtraction, segmentation, feature gating and normalization.
std::vector<CellRecord> process_frames(std::span<const Image> frames, const PreprocessConfig& config);

// CSV columns frame,contour,P,A,d,V,L,C,keep.
void write_feature_csv(std::ostream& out, std::span<const CellRecord> cells);

}  // namespace qpi::preprocess
