#include "dasgan/metrics.hpp"

#include <cmath>

#include "dasgan/error.hpp"

namespace dasgan::metrics {

void Confusion::add(const LabelMask& pred, const LabelMask& truth) {
  require_same_shape(pred, truth);
  auto p = pred.labels();
  auto t = truth.labels();
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] == label::kIgnore) continue;
    if (p[i] == label::kIgnore) throw Error(ErrorKind::InvalidLabel, "prediction contains the ignore label");
    ++counts[t[i]][p[i]];
  }
}

std::uint64_t Confusion::total() const {
  std::uint64_t n = 0;
  for (const auto& row : counts) {
    for (auto v : row) n += v;
  }
  return n;
}

namespace {

struct ClassF1 {
  double value = 0.0;
  bool present = false;
};

ClassF1 f1_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
  const std::uint64_t denom = 2 * tp + fp + fn;
  if (denom == 0) return {1.0, false};
  return {2.0 * static_cast<double>(tp) / static_cast<double>(denom), true};
}

double mean_of(std::initializer_list<ClassF1> classes, AbsentClass policy) {
  double sum = 0.0;
  int n = 0;
  for (const auto& c : classes) {
    if (!c.present && policy == AbsentClass::Exclude) continue;
    sum += c.value;
    ++n;
  }
  return n == 0 ? 1.0 : sum / n;
}

}  // namespace

F1Report f1_scores(const Confusion& confusion, AbsentClass policy) {
  if (confusion.total() == 0) throw Error(ErrorKind::UndefinedMetric, "every pixel is ignored; F1 is undefined");
  const auto& m = confusion.counts;
  std::array<ClassF1, kNumClasses> per{};
  for (int c = 0; c < kNumClasses; ++c) {
    std::uint64_t fp = 0, fn = 0;
    for (int o = 0; o < kNumClasses; ++o) {
      if (o == c) continue;
      fp += m[o][c];
      fn += m[c][o];
    }
    per[c] = f1_from_counts(m[c][c], fp, fn);
  }
  // epithelium: truth in {1,2} vs prediction in {1,2}
  const std::uint64_t tp = m[1][1] + m[1][2] + m[2][1] + m[2][2];
  const std::uint64_t fp = m[0][1] + m[0][2];
  const std::uint64_t fn = m[1][0] + m[2][0];
  const ClassF1 tc = f1_from_counts(tp, fp, fn);

  F1Report r;
  r.other = per[0].value;
  r.tc_negative = per[1].value;
  r.tc_positive = per[2].value;
  r.tc = tc.value;
  r.mean_three = mean_of({per[0], per[1], per[2]}, policy);
  r.mean_binary = mean_of({per[0], tc}, policy);
  return r;
}

F1Report f1_scores(const LabelMask& pred, const LabelMask& truth, AbsentClass policy) {
  Confusion c;
  c.add(pred, truth);
  return f1_scores(c, policy);
}

double tc_score(const LabelMask& mask) {
  const auto negative = mask.count(label::kTcNegative);
  const auto positive = mask.count(label::kTcPositive);
  if (negative + positive == 0) throw Error(ErrorKind::NoEpithelium, "mask has no epithelium; TC score undefined");
  return static_cast<double>(positive) / static_cast<double>(negative + positive);
}

Concordance concordance(std::span<const double> predicted, std::span<const double> truth) {
  if (predicted.size() != truth.size()) throw Error(ErrorKind::InvalidInput, "score vectors differ in length");
  if (predicted.size() < 2) throw Error(ErrorKind::InvalidInput, "concordance needs at least two scores");
  const double n = static_cast<double>(predicted.size());
  double mp = 0.0, mt = 0.0, mae = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    mp += predicted[i];
    mt += truth[i];
    mae += std::abs(predicted[i] - truth[i]);
  }
  mp /= n;
  mt /= n;
  double vp = 0.0, vt = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    vp += (predicted[i] - mp) * (predicted[i] - mp);
    vt += (truth[i] - mt) * (truth[i] - mt);
    cov += (predicted[i] - mp) * (truth[i] - mt);
  }
  vp /= n;
  vt /= n;
  cov /= n;
  if (vp == 0.0 || vt == 0.0) throw Error(ErrorKind::UndefinedMetric, "constant score vector; Pearson correlation undefined");
  Concordance c;
  c.pcc = cov / std::sqrt(vp * vt);
  c.lcc = 2.0 * cov / (vp + vt + (mp - mt) * (mp - mt));
  c.mae = mae / n;
  return c;
}

std::size_t bin_index(double true_score) {
  if (true_score < 1.0) return 0;
  if (true_score < 10.0) return 1;
  if (true_score >= 100.0) return 11;
  return 1 + static_cast<std::size_t>(std::floor(true_score / 10.0));
}

std::vector<Bin> bin_report(std::span<const double> predicted, std::span<const double> truth) {
  if (predicted.size() != truth.size()) throw Error(ErrorKind::InvalidInput, "score vectors differ in length");
  std::vector<Bin> bins(12);
  bins[0].label = "TC<1";
  bins[1].label = "1<=TC<10";
  for (int n = 1; n <= 9; ++n) bins[1 + n].label = std::to_string(10 * n) + "<=TC<" + std::to_string(10 * (n + 1));
  bins[11].label = "TC=100";

  std::vector<std::vector<double>> members(bins.size());
  for (std::size_t i = 0; i < truth.size(); ++i) members[bin_index(truth[i])].push_back(predicted[i]);
  for (std::size_t b = 0; b < bins.size(); ++b) {
    const auto& v = members[b];
    bins[b].count = v.size();
    if (v.empty()) continue;
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    bins[b].mean = mean;
    bins[b].stddev = std::sqrt(var / static_cast<double>(v.size()));
  }
  return bins;
}

TCScoreReport score_report(std::vector<ScoredImage> images) {
  TCScoreReport report;
  std::vector<double> pred, truth;
  for (const auto& img : images) {
    if (!img.tc_true) continue;
    pred.push_back(100.0 * img.tc_cnn);
    truth.push_back(100.0 * *img.tc_true);
  }
  const auto c = concordance(pred, truth);
  report.lcc = c.lcc;
  report.pcc = c.pcc;
  report.mae = c.mae;
  report.bins = bin_report(pred, truth);
  report.per_image = std::move(images);
  return report;
}

}  // namespace dasgan::metrics
