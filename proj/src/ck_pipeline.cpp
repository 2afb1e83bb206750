#include "dasgan/ck_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <boost/multiprecision/cpp_int.hpp>
#include <fstream>
#include <nlohmann/json.hpp>

#include "dasgan/error.hpp"

namespace dasgan::ck {

namespace {

using Rows = StainMatrix::Rows;

double determinant(const Rows& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

Rows invert(const Rows& m) {
  const double det = determinant(m);
  // Rows are unit norm, so |det| <= 1 and a tiny value means near-parallel stains.
  if (!std::isfinite(det) || std::abs(det) < 1e-9) {
    throw Error(ErrorKind::Configuration, "stain matrix is singular");
  }
  Rows inv{};
  inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return inv;
}

std::array<double, 3> normalized(std::array<double, 3> v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  if (!(n > 0.0) || !std::isfinite(n)) throw Error(ErrorKind::Configuration, "stain vector has zero norm");
  for (auto& x : v) x /= n;
  return v;
}

}  // namespace

StainMatrix::StainMatrix(const Rows& rows) {
  for (int r = 0; r < 3; ++r) rows_[r] = normalized(rows[r]);
  inverse_ = invert(rows_);
}

StainMatrix StainMatrix::hematoxylin_dab() {
  const std::array<double, 3> h = normalized({0.650, 0.704, 0.286});
  const std::array<double, 3> dab = normalized({0.268, 0.570, 0.776});
  const std::array<double, 3> residual = {h[1] * dab[2] - h[2] * dab[1], h[2] * dab[0] - h[0] * dab[2], h[0] * dab[1] - h[1] * dab[0]};
  return StainMatrix({h, dab, residual});
}

StainMatrix StainMatrix::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open stain matrix file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    Rows rows{};
    const auto& data = j.at("rows");
    if (data.size() != 3) throw Error(ErrorKind::Configuration, "stain matrix needs 3 rows");
    for (int r = 0; r < 3; ++r) {
      if (data[r].size() != 3) throw Error(ErrorKind::Configuration, "stain matrix rows need 3 values");
      for (int c = 0; c < 3; ++c) rows[r][c] = data[r][c].get<double>();
    }
    return StainMatrix(rows);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Configuration, std::string("malformed stain matrix file: ") + e.what());
  }
}

void StainMatrix::save(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["rows"] = rows_;
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<double> StainDensities::channel(int c) const {
  std::vector<double> out(values.size() / 3);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = values[i * 3 + c];
  return out;
}

BinaryMask BinaryMask::empty(int height, int width) {
  return {height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width, 0)};
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](auto v) { return v != 0; }));
}

StainDensities color_deconvolve(const ImagePatch& patch, const StainMatrix& stains) {
  const auto& inv = stains.inverse();
  auto px = patch.pixels();
  StainDensities out{patch.height(), patch.width(), std::vector<double>(px.size())};
  for (std::size_t i = 0; i < px.size(); i += 3) {
    double od[3];
    for (int c = 0; c < 3; ++c) od[c] = -std::log10(std::max(static_cast<double>(px[i + c]), kOpticalDensityFloor));
    // od (row vector) = densities * stains  =>  densities = od * inverse
    for (int s = 0; s < 3; ++s) {
      const double d = od[0] * inv[0][s] + od[1] * inv[1][s] + od[2] * inv[2][s];
      out.values[i + s] = std::max(d, 0.0);
    }
  }
  return out;
}

std::array<double, 3> compose_stains(const std::array<double, 3>& densities, const StainMatrix& stains) {
  const auto& m = stains.rows();
  std::array<double, 3> rgb{};
  for (int c = 0; c < 3; ++c) {
    const double od = densities[0] * m[0][c] + densities[1] * m[1][c] + densities[2] * m[2][c];
    rgb[c] = std::pow(10.0, -od);
  }
  return rgb;
}

Histogram build_histogram(std::span<const double> channel, int bins) {
  if (bins < 2) throw Error(ErrorKind::InvalidArgument, "histogram needs at least 2 bins");
  if (channel.empty()) throw Error(ErrorKind::DegenerateInput, "empty channel");
  const auto [lo, hi] = std::minmax_element(channel.begin(), channel.end());
  Histogram h{*lo, *hi, std::vector<std::uint64_t>(static_cast<std::size_t>(bins), 0)};
  if (!(h.max > h.min)) throw Error(ErrorKind::DegenerateInput, "constant channel has no threshold");
  const double scale = static_cast<double>(bins) / (h.max - h.min);
  for (double v : channel) {
    auto k = static_cast<std::int64_t>((v - h.min) * scale);
    k = std::clamp<std::int64_t>(k, 0, bins - 1);
    ++h.counts[static_cast<std::size_t>(k)];
  }
  return h;
}

std::size_t otsu_bin(std::span<const std::uint64_t> counts) {
  // With the bin index as intensity, the between-class variance of a split with
  // n0/n1 pixels and index sums s0/s1 is (s1*n0 - s0*n1)^2 / (N^2 n0 n1).
  // Candidates are compared by exact cross-multiplication.
  using boost::multiprecision::uint256_t;
  std::uint64_t total = 0;
  uint256_t total_sum = 0;
  std::size_t populated = 0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    total += counts[k];
    total_sum += uint256_t(counts[k]) * k;
    populated += counts[k] > 0 ? 1 : 0;
  }
  if (populated < 2) throw Error(ErrorKind::DegenerateInput, "histogram has fewer than two populated bins");
  if (total >> 32 != 0 || counts.size() >> 16 != 0) throw Error(ErrorKind::InvalidArgument, "histogram too large for exact Otsu");

  std::size_t best_k = 0;
  uint256_t best_d2 = 0, best_q = 1;
  std::uint64_t n0 = 0;
  uint256_t s0 = 0;
  for (std::size_t k = 1; k < counts.size(); ++k) {
    n0 += counts[k - 1];
    s0 += uint256_t(counts[k - 1]) * (k - 1);
    const std::uint64_t n1 = total - n0;
    if (n0 == 0 || n1 == 0) continue;
    const uint256_t upper = (total_sum - s0) * n0;
    const uint256_t lower = s0 * n1;
    const uint256_t d = upper >= lower ? upper - lower : lower - upper;
    const uint256_t d2 = d * d;
    const uint256_t q = uint256_t(n0) * n1;
    // strictly greater keeps the smallest k on ties
    if (best_k == 0 || d2 * best_q > best_d2 * q) {
      best_k = k;
      best_d2 = d2;
      best_q = q;
    }
  }
  return best_k;
}

double otsu_threshold(std::span<const double> channel, int bins) {
  const Histogram h = build_histogram(channel, bins);
  return h.edge(otsu_bin(h.counts));
}

BinaryMask morphological_close(const BinaryMask& mask, int radius) {
  if (radius < 0) throw Error(ErrorKind::InvalidArgument, "closing radius must be >= 0");
  if (radius == 0) return mask;

  std::vector<std::pair<int, int>> disk;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dx * dx + dy * dy <= radius * radius) disk.emplace_back(dy, dx);
    }
  }
  const int h = mask.height, w = mask.width, r = radius;
  const int ph = h + 2 * r, pw = w + 2 * r;
  std::vector<std::uint8_t> dilated(static_cast<std::size_t>(ph) * pw, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.at(y, x)) continue;
      for (auto [dy, dx] : disk) dilated[static_cast<std::size_t>(y + r + dy) * pw + (x + r + dx)] = 1;
    }
  }
  BinaryMask out = BinaryMask::empty(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      bool keep = true;
      for (auto [dy, dx] : disk) {
        if (!dilated[static_cast<std::size_t>(y + r + dy) * pw + (x + r + dx)]) {
          keep = false;
          break;
        }
      }
      out.values[static_cast<std::size_t>(y) * w + x] = keep ? 1 : 0;
    }
  }
  return out;
}

BinaryMask segment_ck(const ImagePatch& patch, const StainMatrix& stains, const SegmentOptions& options) {
  if (patch.domain() != Domain::B) throw Error(ErrorKind::InvalidInput, "segment_ck expects a domain-B (CK) patch");
  if (options.ck_channel < 0 || options.ck_channel > 2) throw Error(ErrorKind::Configuration, "ck_channel must be 0, 1 or 2");
  const auto channel = color_deconvolve(patch, stains).channel(options.ck_channel);

  const double peak = *std::max_element(channel.begin(), channel.end());
  const double floor = *std::min_element(channel.begin(), channel.end());
  if (peak < options.blank_density || !(peak > floor)) {
    if (options.on_blank == BlankPolicy::Error) {
      throw Error(ErrorKind::DegenerateInput, "patch '" + patch.id() + "' carries no CK stain");
    }
    return BinaryMask::empty(patch.height(), patch.width());
  }

  const double threshold = otsu_threshold(channel, options.bins);
  BinaryMask binary = BinaryMask::empty(patch.height(), patch.width());
  for (std::size_t i = 0; i < channel.size(); ++i) binary.values[i] = channel[i] >= threshold ? 1 : 0;
  return morphological_close(binary, options.close_radius);
}

std::pair<LabelMask, LabelMask> condition_masks(const BinaryMask& binary, Domain domain) {
  std::vector<std::uint8_t> negative(binary.values.size()), positive(binary.values.size());
  for (std::size_t i = 0; i < binary.values.size(); ++i) {
    const bool epithelium = binary.values[i] != 0;
    negative[i] = epithelium ? label::kTcNegative : label::kOther;
    positive[i] = epithelium ? label::kTcPositive : label::kOther;
  }
  return {LabelMask(binary.height, binary.width, std::move(negative), domain),
          LabelMask(binary.height, binary.width, std::move(positive), domain)};
}

LabelMask condition_label_mask(const LabelMask& ck_mask, bool positive) {
  std::vector<std::uint8_t> out(ck_mask.labels().begin(), ck_mask.labels().end());
  for (auto& v : out) {
    if (v == label::kTcNegative || v == label::kTcPositive) v = positive ? label::kTcPositive : label::kTcNegative;
  }
  return LabelMask(ck_mask.height(), ck_mask.width(), std::move(out), ck_mask.domain());
}

LabelMask to_label_mask(const BinaryMask& binary, Domain domain) { return condition_masks(binary, domain).first; }

BinaryMask to_binary_mask(const LabelMask& mask) {
  BinaryMask out = BinaryMask::empty(mask.height(), mask.width());
  auto labels = mask.labels();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out.values[i] = (labels[i] == label::kTcNegative || labels[i] == label::kTcPositive) ? 1 : 0;
  }
  return out;
}

double intersection_over_union(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width) throw Error(ErrorKind::ShapeMismatch, "IoU of differently shaped masks");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    inter += (a.values[i] && b.values[i]) ? 1 : 0;
    uni += (a.values[i] || b.values[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace dasgan::ck
