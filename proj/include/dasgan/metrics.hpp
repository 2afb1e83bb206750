#pragma once

// Segmentation and scoring metrics: per-class F1, Tumor Cell score as a
// relative TC+ area, and agreement statistics between predicted and true
// scores.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dasgan/datamodel.hpp"

namespace dasgan::metrics {

/// What F1 means for a class absent from both prediction and truth.
enum class AbsentClass { CountAsOne, Exclude };

/// Pixel counts over {Other, TC-, TC+} (rows = truth, cols = prediction).
/// Ignore pixels in the truth are skipped.
struct Confusion {
  std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> counts{};

  void add(const LabelMask& pred, const LabelMask& truth);
  std::uint64_t total() const;
};

struct F1Report {
  double other = 0.0;
  double tc_negative = 0.0;
  double tc_positive = 0.0;
  double tc = 0.0;           // epithelium = TC- u TC+
  double mean_three = 0.0;   // mean over reported {Other, TC-, TC+}
  double mean_binary = 0.0;  // mean over reported {Other, TC}
};

F1Report f1_scores(const Confusion& confusion, AbsentClass policy = AbsentClass::CountAsOne);
F1Report f1_scores(const LabelMask& pred, const LabelMask& truth, AbsentClass policy = AbsentClass::CountAsOne);

/// #TC+ / (#TC- + #TC+) in [0,1]. Throws NoEpithelium when both counts are zero.
double tc_score(const LabelMask& mask);

struct Concordance {
  double lcc = 0.0;
  double pcc = 0.0;
  double mae = 0.0;
};

/// Lin's concordance, Pearson correlation and mean absolute error (in the
/// units of the inputs). Population moments.
Concordance concordance(std::span<const double> predicted, std::span<const double> truth);

struct Bin {
  std::string label;
  double mean = 0.0;
  double stddev = 0.0;  // population
  std::size_t count = 0;
};

/// 12 bins over the true score (in [0,100]): TC<1, 1<=TC<10, 10n<=TC<10(n+1) for n=1..9, TC=100.
std::size_t bin_index(double true_score);
std::vector<Bin> bin_report(std::span<const double> predicted, std::span<const double> truth);

struct ScoredImage {
  std::string id;
  double tc_cnn = 0.0;  // [0,1]
  std::optional<double> tc_true;  // [0,1]
};

struct TCScoreReport {
  std::vector<ScoredImage> per_image;
  double lcc = 0.0;
  double pcc = 0.0;
  double mae = 0.0;  // percentage points
  std::vector<Bin> bins;  // predicted scores in [0,100] binned by true score
};

/// Aggregates per-image scores that carry a true value. Needs at least two of them.
TCScoreReport score_report(std::vector<ScoredImage> images);

}  // namespace dasgan::metrics
