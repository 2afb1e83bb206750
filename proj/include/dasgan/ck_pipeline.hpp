#pragma once

// Heuristic epithelium labeling on CK-like images: colour deconvolution,
// Otsu binarization of the CK stain channel, morphological closing. Also turns
// a binary CK mask into the two three-class conditioning masks.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "dasgan/datamodel.hpp"

namespace dasgan::ck {

/// Rows are unit-norm optical-density vectors: stain 1, stain 2, residual.
class StainMatrix {
 public:
  using Rows = std::array<std::array<double, 3>, 3>;

  /// Rows are normalized; a zero row or a singular matrix throws Configuration.
  explicit StainMatrix(const Rows& rows);

  /// Hematoxylin / DAB (Ruifrok-Johnson), residual = normalized cross product.
  static StainMatrix hematoxylin_dab();
  static StainMatrix load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  const Rows& rows() const { return rows_; }
  const Rows& inverse() const { return inverse_; }
  const std::array<double, 3>& stain(int index) const { return rows_[index]; }

 private:
  Rows rows_{};
  Rows inverse_{};
};

inline constexpr int kHematoxylinChannel = 0;
inline constexpr int kDabChannel = 1;
inline constexpr double kOpticalDensityFloor = 1e-6;

/// H x W x 3 stain densities (row-major, channel fastest).
struct StainDensities {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  double at(int y, int x, int c) const { return values[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::vector<double> channel(int c) const;
};

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;  // 1 = epithelium

  static BinaryMask empty(int height, int width);
  bool at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x] != 0; }
  std::size_t count() const;
  bool operator==(const BinaryMask&) const = default;
};

StainDensities color_deconvolve(const ImagePatch& patch, const StainMatrix& stains);

/// Inverse of color_deconvolve for one pixel: 10^(-densities . stains).
std::array<double, 3> compose_stains(const std::array<double, 3>& densities, const StainMatrix& stains);

/// Histogram over [min, max] with `bins` equal-width bins; the max value lands in the last bin.
struct Histogram {
  double min = 0.0;
  double max = 0.0;
  std::vector<std::uint64_t> counts;

  double bin_width() const { return (max - min) / static_cast<double>(counts.size()); }
  double edge(std::size_t k) const { return min + static_cast<double>(k) * bin_width(); }
};

Histogram build_histogram(std::span<const double> channel, int bins);

/// Bin index k in [1, bins-1] maximizing the between-class variance of the split
/// {bins < k} / {bins >= k}. Exact integer arithmetic; ties go to the smallest k.
/// Throws DegenerateInput when fewer than two bins are populated.
std::size_t otsu_bin(std::span<const std::uint64_t> counts);

/// Threshold at the lower edge of the Otsu bin. Constant channels throw DegenerateInput.
double otsu_threshold(std::span<const double> channel, int bins = 256);

/// Dilation then erosion with a disk of the given radius; pixels outside the
/// image count as background. Radius 0 is the identity.
BinaryMask morphological_close(const BinaryMask& mask, int radius);

enum class BlankPolicy { EmptyMask, Error };

struct SegmentOptions {
  int ck_channel = kDabChannel;
  int close_radius = 2;
  int bins = 256;
  /// Patches whose peak CK density stays below this are treated as blank.
  double blank_density = 0.1;
  BlankPolicy on_blank = BlankPolicy::EmptyMask;
};

BinaryMask segment_ck(const ImagePatch& patch, const StainMatrix& stains, const SegmentOptions& options = {});

/// TC- variant (epithelium = 1) and TC+ variant (epithelium = 2).
std::pair<LabelMask, LabelMask> condition_masks(const BinaryMask& binary, Domain domain = Domain::B);

/// Same labelling applied to a CK LabelMask (epithelium = 1); unannotated pixels stay 255.
LabelMask condition_label_mask(const LabelMask& ck_mask, bool positive);

LabelMask to_label_mask(const BinaryMask& binary, Domain domain);
BinaryMask to_binary_mask(const LabelMask& mask);

double intersection_over_union(const BinaryMask& a, const BinaryMask& b);

}  // namespace dasgan::ck
