// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance fast          criteria 1-8
//   acceptance experiments   criteria 9-11 (seeded training runs, long)
//   acceptance <n>...        selected criteria

#include <Eigen/Dense>

#include <chrono>
#include <cstdlib>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "../support/oracles.hpp"
#include "dasgan/ck_pipeline.hpp"
#include "dasgan/losses.hpp"
#include "dasgan/metrics.hpp"
#include "dasgan/networks.hpp"
#include "dasgan/synthdata.hpp"
#include "dasgan/training.hpp"
#include "experiment.hpp"

using namespace dasgan;

namespace {

// Tolerances
constexpr double kLossTolerance = 1e-6;
constexpr int kLossTrials = 200;
constexpr double kGradRelTolerance = 1e-4;
constexpr double kGradStep = 1e-6;
/// Denominator floor of the relative error, for parameters whose gradient is (near) zero.
constexpr double kGradFloor = 1e-4;
constexpr int kGradMaxParams = 500;
constexpr double kGradParamJitter = 0.3;
constexpr int kOtsuTrials = 1000;
constexpr int kCkPatches = 100;
constexpr double kCkMinIoU = 0.98;
constexpr int kSnMatrices = 100;
constexpr double kSnTolerance = 1e-3;
constexpr int kSnSteps = 200;
constexpr double kMetricTolerance = 1e-9;
constexpr double kRequiredMargin = 0.02;
constexpr double kMinimumF1 = 0.70;
constexpr double kDeterminismTolerance = 1e-3;

struct Verdict {
  bool pass;
  std::string detail;
};

using Criterion = std::function<Verdict()>;

std::vector<double> to_vector(const torch::Tensor& t) {
  const auto c = t.to(torch::kDouble).contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Loss oracles

Verdict loss_oracles() {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> dim(1, 6);
  double worst = 0.0;
  torch::manual_seed(11);
  for (int trial = 0; trial < kLossTrials; ++trial) {
    const int n = dim(rng), h = dim(rng), w = dim(rng);
    // scores touching the clamp boundaries on some trials
    auto real = torch::rand({n, 1, h, w}, torch::kDouble);
    auto fake = torch::rand({n, 1, h, w}, torch::kDouble);
    if (trial % 10 == 0) {
      real.index_put_({0, 0, 0, 0}, 0.0);
      fake.index_put_({0, 0, 0, 0}, 1.0);
    }
    const auto rv = to_vector(real), fv = to_vector(fake);
    worst = std::max(worst, std::abs(loss::adversarial_loss_d(real, fake).item<double>() - oracle::adversarial_d(rv, fv, loss::kLogEps)));
    worst = std::max(worst, std::abs(loss::adversarial_loss_g(fake).item<double>() - oracle::adversarial_g(fv, loss::kLogEps)));

    const auto xa = torch::rand({n, 3, h, w}, torch::kDouble), ca = torch::rand({n, 3, h, w}, torch::kDouble);
    const auto xb = torch::rand({n, 3, h, w}, torch::kDouble), cb = torch::rand({n, 3, h, w}, torch::kDouble);
    const double cyc = oracle::mean_abs_diff(to_vector(xa), to_vector(ca)) + oracle::mean_abs_diff(to_vector(xb), to_vector(cb));
    worst = std::max(worst, std::abs(loss::cycle_loss(xa, ca, xb, cb).item<double>() - cyc));

    auto labels = torch::randint(0, 3, {n, h, w}, torch::kInt64);
    labels = torch::where(torch::rand({n, h, w}) < 0.2, torch::full_like(labels, 255), labels);
    const auto post = torch::softmax(torch::randn({n, 3, h, w}, torch::kDouble) * 3.0, 1);
    const auto lv = labels.contiguous();
    const std::span<const std::int64_t> ls(lv.data_ptr<std::int64_t>(), static_cast<std::size_t>(lv.numel()));
    const auto pv = to_vector(post);
    const double ce = oracle::cross_entropy(ls, pv, n, 3, h, w, loss::kLogEps);
    worst = std::max(worst, std::abs(loss::cross_entropy(labels, post).item<double>() - ce));
    worst = std::max(worst, std::abs(loss::segmentation_loss(labels, post, labels, post).item<double>() - 2 * ce));
  }

  const loss::LossWeights weights;
  bool exact = weights.lambda_cycle == 10.0 && weights.lambda_seg == 1.0;
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int trial = 0; trial < kLossTrials; ++trial) {
    loss::LossReport r{u(rng), u(rng), u(rng), u(rng), 0.0};
    const double expected = r.gan_ab + r.gan_ba + 10.0 * r.cycle + 1.0 * r.seg;
    exact = exact && loss::total_loss(r, weights) == expected;
    const auto t = loss::total_loss(torch::tensor(r.gan_ab, torch::kDouble), torch::tensor(r.gan_ba, torch::kDouble),
                                    torch::tensor(r.cycle, torch::kDouble), torch::tensor(r.seg, torch::kDouble), weights);
    exact = exact && t.item<double>() == expected;
  }
  return {worst < kLossTolerance && exact, fmt("max |delta| = %.3g over %d inputs x 5 losses; weighted total exact: %s", worst,
                                                kLossTrials, exact ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 2. Gradient check on a double-precision miniature

nn::NetworkConfig miniature() {
  nn::NetworkConfig c;
  c.generator.base_filters = 1;
  c.generator.max_filters = 1;
  c.generator.num_downsampling = 1;
  c.generator.num_resnet_blocks = 1;
  c.generator.stem_kernel = 1;
  c.generator.attention_reduction = 1;
  c.discriminator.base_filters = 1;
  c.discriminator.max_filters = 1;
  c.discriminator.kernel = 2;
  c.discriminator.seg_resnet_blocks = 1;
  c.discriminator.source_hidden = false;
  c.discriminator.attention_reduction = 1;
  return c;
}

struct GradResult {
  double worst = 0.0;
  std::string worst_at;
  std::int64_t checked = 0;
};

using NamedParams = std::vector<std::pair<std::string, torch::Tensor>>;

/// Central differences of `objective` against its autograd gradient for each
/// entry of each tensor in `params`.
GradResult gradient_check(const std::function<torch::Tensor()>& objective, const NamedParams& params) {
  for (auto [name, p] : params) {
    if (p.grad().defined()) p.mutable_grad().zero_();
  }
  objective().backward();
  GradResult r;
  torch::NoGradGuard no_grad;
  for (auto [name, p] : params) {
    const auto grad = p.grad().defined() ? p.grad().clone() : torch::zeros_like(p);
    auto flat = p.view(-1);
    auto gflat = grad.view(-1);
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
      const double orig = flat[i].item<double>();
      flat[i].fill_(orig + kGradStep);
      const double up = objective().item<double>();
      flat[i].fill_(orig - kGradStep);
      const double down = objective().item<double>();
      flat[i].fill_(orig);
      const double numeric = (up - down) / (2 * kGradStep);
      const double analytic = gflat[i].item<double>();
      const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), kGradFloor});
      if (std::getenv("DASGAN_GRADCHECK_VERBOSE") && rel > kGradRelTolerance) {
        std::printf("  %s[%lld] analytic %.9g numeric %.9g\n", name.c_str(), static_cast<long long>(i), analytic, numeric);
      }
      if (rel > r.worst) r.worst = rel, r.worst_at = name + "[" + std::to_string(i) + "]";
      ++r.checked;
    }
  }
  return r;
}

Verdict gradient_check_criterion() {
  auto bundle = nn::NetworkBundle::create(miniature(), 5);
  bundle.to(torch::kDouble);
  bundle.train(false);
  {
    // Zero biases and gamma put whole regions exactly on ReLU kinks and keep
    // attention out of the graph; a random offset moves away from both.
    torch::NoGradGuard no_grad;
    torch::manual_seed(8);
    for (auto& [name, p] : bundle.parameter_registry()) p.add_(torch::randn_like(p) * kGradParamJitter);
  }
  const auto count = bundle.parameter_count();
  if (count > kGradMaxParams) return {false, fmt("miniature has %lld parameters", static_cast<long long>(count))};

  torch::manual_seed(6);
  const int n = 2, size = 8;
  train::Batch a{torch::rand({n, 3, size, size}, torch::kDouble), torch::randint(0, 3, {n, size, size}, torch::kInt64)};
  a.labels.index_put_({0, 0}, 255);
  auto b_mask = (torch::rand({n, size, size}) < 0.4).to(torch::kInt64);
  train::Batch b{torch::rand({n, 3, size, size}, torch::kDouble), b_mask};
  const loss::LossWeights weights;

  NamedParams all, d_params;
  for (auto& [name, p] : bundle.parameter_registry()) {
    all.emplace_back(name, p);
    if (name.starts_with("d_")) d_params.emplace_back(name, p);
  }

  auto g_total = [&] {
    const auto fakes = train::translate(bundle, a, b);
    return train::generator_objective(bundle, a, b, fakes, weights, true).total;
  };
  const auto g = gradient_check(g_total, all);

  train::Translations fixed;
  {
    torch::NoGradGuard no_grad;
    fixed = train::translate(bundle, a, b);
  }
  auto d_total = [&] {
    return train::discriminator_objective(bundle, a, b, fixed.fake_a, fixed.fake_b, fixed.fake_a, fixed.fake_b, weights).total;
  };
  const auto d = gradient_check(d_total, d_params);

  const double worst = std::max(g.worst, d.worst);
  return {worst < kGradRelTolerance,
          fmt("%lld parameters; generator-side total: max rel err %.3g over %lld entries (%s); discriminator-side total: %.3g over %lld (%s)",
              static_cast<long long>(count), g.worst, static_cast<long long>(g.checked), g.worst_at.c_str(), d.worst,
              static_cast<long long>(d.checked), d.worst_at.c_str())};
}

// ---------------------------------------------------------------------------
// 3. Otsu

Verdict otsu_equivalence() {
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<int> bins(2, 256);
  std::uniform_int_distribution<int> shape(0, 3);
  int matches = 0;
  for (int trial = 0; trial < kOtsuTrials; ++trial) {
    std::vector<std::uint64_t> counts(static_cast<std::size_t>(bins(rng)));
    switch (shape(rng)) {
      case 0: {  // uniform random counts
        std::uniform_int_distribution<std::uint64_t> c(0, 1000);
        for (auto& v : counts) v = c(rng);
        break;
      }
      case 1: {  // sparse, many empty bins
        std::uniform_int_distribution<std::uint64_t> c(0, 5);
        for (auto& v : counts) v = c(rng) > 3 ? c(rng) : 0;
        break;
      }
      case 2: {  // two spikes with equal mass: plateau of tied splits
        std::uniform_int_distribution<std::size_t> pos(0, counts.size() - 1);
        const auto p = pos(rng), q = pos(rng);
        counts[p] += 50;
        counts[q] += 50;
        break;
      }
      default: {  // bimodal
        std::normal_distribution<double> lo(0.3, 0.08), hi(0.7, 0.1);
        for (int i = 0; i < 2000; ++i) {
          const double x = (i % 3 == 0 ? hi : lo)(rng);
          const auto k = static_cast<std::size_t>(std::clamp(x, 0.0, 0.999999) * static_cast<double>(counts.size()));
          ++counts[k];
        }
      }
    }
    std::size_t nonzero = 0;
    for (auto v : counts) nonzero += v > 0;
    if (nonzero < 2) counts.front() += 1, counts.back() += 1;
    matches += ck::otsu_bin(counts) == oracle::otsu_brute_force(counts);
  }
  return {matches == kOtsuTrials, fmt("%d/%d histograms match the exact brute force", matches, kOtsuTrials)};
}

// ---------------------------------------------------------------------------
// 4. CK pipeline on noise-free patches

Verdict ck_recovery() {
  synth::SynthConfig c;
  c.seed = 17;
  c.noise_sigma = 0.0;
  const auto stains = ck::StainMatrix::hematoxylin_dab();
  double worst = 1.0, sum = 0.0;
  int scored = 0;
  for (const auto& s : synth::generate_b(c, 2 * kCkPatches)) {
    if (scored == kCkPatches) break;
    if (s.mask.count() == 0) continue;
    const double iou = ck::intersection_over_union(ck::segment_ck(s.image, stains), s.mask);
    worst = std::min(worst, iou);
    sum += iou;
    ++scored;
  }
  return {sum / scored >= kCkMinIoU, fmt("mean IoU over %d patches %.4f (min %.4f)", scored, sum / scored, worst)};
}

// ---------------------------------------------------------------------------
// 5. Spectral normalization

double top_singular_value(const torch::Tensor& m) {
  const auto t = m.to(torch::kDouble).contiguous();
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> e(t.data_ptr<double>(), t.size(0), t.size(1));
  return Eigen::JacobiSVD<Eigen::MatrixXd>(e).singularValues()(0);
}

Verdict spectral_norm() {
  torch::manual_seed(19);
  std::mt19937_64 rng(19);
  std::uniform_int_distribution<int> dim(2, 48);
  double worst = 0.0;
  for (int trial = 0; trial < kSnMatrices; ++trial) {
    const auto w = torch::randn({dim(rng), dim(rng)}, torch::kDouble) * (0.1 + trial * 0.05);
    auto u = torch::randn({w.size(0)}, torch::kDouble);
    torch::Tensor normalized;
    // one power iteration per training step, persistent u
    for (int step = 0; step < kSnSteps; ++step) normalized = nn::spectral_normalize(w, 1, u);
    worst = std::max(worst, std::abs(top_singular_value(normalized) - 1.0));
  }
  return {worst <= kSnTolerance, fmt("max |sigma_max - 1| = %.3g over %d matrices after %d single-iteration steps", worst, kSnMatrices, kSnSteps)};
}

// ---------------------------------------------------------------------------
// 6. Mask conditioning

Verdict mask_conditioning() {
  int exact = 0;
  for (int bits = 0; bits < (1 << 16); ++bits) {
    ck::BinaryMask m = ck::BinaryMask::empty(4, 4);
    for (int i = 0; i < 16; ++i) m.values[static_cast<std::size_t>(i)] = (bits >> i) & 1;
    const auto [neg, pos] = ck::condition_masks(m);
    bool ok = true;
    for (int i = 0; i < 16; ++i) {
      const bool epi = (bits >> i) & 1;
      ok = ok && neg.labels()[static_cast<std::size_t>(i)] == (epi ? 1 : 0) && pos.labels()[static_cast<std::size_t>(i)] == (epi ? 2 : 0);
    }
    exact += ok;
  }
  return {exact == (1 << 16), fmt("%d/65536 binary 4x4 masks conditioned exactly", exact)};
}

// ---------------------------------------------------------------------------
// 7. Metrics

Verdict metrics_suite() {
  std::mt19937_64 rng(23);
  std::uniform_int_distribution<int> cls(0, 2), coin(0, 9);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::uint8_t> p(64), t(64);
    const int drop = trial % 4;  // sometimes a class is missing from both
    for (std::size_t i = 0; i < 64; ++i) {
      auto draw = [&] {
        int v = cls(rng);
        return static_cast<std::uint8_t>(v == drop && drop < 3 ? (v + 1) % 3 : v);
      };
      p[i] = draw();
      t[i] = coin(rng) == 0 ? 255 : draw();
    }
    const LabelMask pm(8, 8, p, Domain::A), tm(8, 8, t, Domain::A);
    const auto r = metrics::f1_scores(pm, tm);
    auto with_policy = [](double v) { return v < 0 ? 1.0 : v; };
    const double o0 = with_policy(oracle::f1_class(p, t, 0)), o1 = with_policy(oracle::f1_class(p, t, 1)),
                 o2 = with_policy(oracle::f1_class(p, t, 2));
    worst = std::max({worst, std::abs(r.other - o0), std::abs(r.tc_negative - o1), std::abs(r.tc_positive - o2),
                      std::abs(r.mean_three - (o0 + o1 + o2) / 3.0), std::abs(r.tc - with_policy(oracle::f1_epithelium(p, t)))});

    std::size_t neg = 0, pos = 0;
    for (auto v : p) neg += v == 1, pos += v == 2;
    if (neg + pos > 0) worst = std::max(worst, std::abs(metrics::tc_score(pm) - double(pos) / double(neg + pos)));
  }

  std::uniform_real_distribution<double> score(0.0, 100.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x(20), y(20);
    for (std::size_t i = 0; i < 20; ++i) x[i] = score(rng), y[i] = std::clamp(x[i] + score(rng) / 5 - 10, 0.0, 100.0);
    const auto c = metrics::concordance(x, y);
    double mae = 0;
    for (std::size_t i = 0; i < 20; ++i) mae += std::abs(x[i] - y[i]) / 20.0;
    worst = std::max({worst, std::abs(c.pcc - oracle::pearson(x, y)), std::abs(c.lcc - oracle::lin(x, y)), std::abs(c.mae - mae)});
  }

  std::vector<double> v(30), shifted(30);
  for (std::size_t i = 0; i < 30; ++i) v[i] = score(rng), shifted[i] = v[i] + 7.5;
  const auto same = metrics::concordance(v, v);
  const auto shift = metrics::concordance(shifted, v);
  const bool identity = std::abs(same.lcc - 1) < kMetricTolerance && std::abs(same.pcc - 1) < kMetricTolerance && same.mae == 0.0;
  const bool shift_ok = std::abs(shift.pcc - 1) < kMetricTolerance && shift.lcc < 1.0 && std::abs(shift.mae - 7.5) < kMetricTolerance;
  return {worst < kMetricTolerance && identity && shift_ok,
          fmt("max |delta| vs oracles %.3g; identical (%.6f, %.6f, %.3g); shift 7.5 (Pcc %.6f, Lcc %.4f, MAE %.6f)", worst, same.lcc,
              same.pcc, same.mae, shift.pcc, shift.lcc, shift.mae)};
}

// ---------------------------------------------------------------------------
// 8. Statement

Verdict paper_numbers() {
  return {true,
          "published clinical figures (F1 0.886/0.850 and 0.916/0.899, Lcc 0.93, Pcc 0.94, MAE 7.30, n=704) are not reproducible "
          "without the clinical cohorts; criteria 9-10 replace them with a seeded synthetic experiment"};
}

// ---------------------------------------------------------------------------
// 9-11. Seeded experiments

struct Experiments {
  std::optional<experiment::Outcome> dasgan_poor, seg_poor, dasgan_full, seg_full, dasgan_poor_repeat;

  const experiment::Outcome& get(std::optional<experiment::Outcome>& slot, train::Mode mode, double fraction) {
    if (!slot) {
      slot = experiment::run(mode, fraction);
      std::printf("  run %-8s annotation %.2f: validation F1 %.4f (best test F1 %.4f at %d, %.0f s)\n",
                  std::string(train::to_string(mode)).c_str(), fraction, slot->validation_f1, slot->best_test_f1, slot->best_iteration,
                  slot->seconds);
      std::fflush(stdout);
    }
    return *slot;
  }
};

Experiments experiments;

Verdict ordering() {
  const auto& d = experiments.get(experiments.dasgan_poor, train::Mode::Dasgan, experiment::kPoorAnnotationFraction);
  const auto& s = experiments.get(experiments.seg_poor, train::Mode::SegOnlyReal, experiment::kPoorAnnotationFraction);
  const bool pass = d.validation_f1 >= s.validation_f1 + kRequiredMargin && d.validation_f1 >= kMinimumF1 && s.validation_f1 >= kMinimumF1;
  return {pass, fmt("annotation %.2f: DASGAN %.4f vs seg-real %.4f (margin %.4f, required %.2f; floor %.2f)", experiment::kPoorAnnotationFraction,
                    d.validation_f1, s.validation_f1, d.validation_f1 - s.validation_f1, kRequiredMargin, kMinimumF1)};
}

Verdict trend() {
  const auto& dp = experiments.get(experiments.dasgan_poor, train::Mode::Dasgan, experiment::kPoorAnnotationFraction);
  const auto& sp = experiments.get(experiments.seg_poor, train::Mode::SegOnlyReal, experiment::kPoorAnnotationFraction);
  const auto& df = experiments.get(experiments.dasgan_full, train::Mode::Dasgan, experiment::kFullAnnotationFraction);
  const auto& sf = experiments.get(experiments.seg_full, train::Mode::SegOnlyReal, experiment::kFullAnnotationFraction);
  const double gap_poor = dp.validation_f1 - sp.validation_f1, gap_full = df.validation_f1 - sf.validation_f1;
  return {gap_full <= gap_poor, fmt("gap with full annotations %.4f <= gap annotation-poor %.4f", gap_full, gap_poor)};
}

Verdict determinism() {
  const auto& first = experiments.get(experiments.dasgan_poor, train::Mode::Dasgan, experiment::kPoorAnnotationFraction);
  const auto& again = experiments.get(experiments.dasgan_poor_repeat, train::Mode::Dasgan, experiment::kPoorAnnotationFraction);
  const double delta = std::abs(first.validation_f1 - again.validation_f1);
  return {delta <= kDeterminismTolerance, fmt("repeat with seed %llu: |delta F1| = %.6f (tolerance %.3f)",
                                             static_cast<unsigned long long>(experiment::kDefaultSeed), delta, kDeterminismTolerance)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, std::pair<std::string, Criterion>> criteria = {
      {1, {"loss oracles", loss_oracles}},
      {2, {"gradient check", gradient_check_criterion}},
      {3, {"Otsu equivalence", otsu_equivalence}},
      {4, {"CK pipeline recovery", ck_recovery}},
      {5, {"spectral norm", spectral_norm}},
      {6, {"mask conditioning", mask_conditioning}},
      {7, {"metrics", metrics_suite}},
      {8, {"published-number statement", paper_numbers}},
      {9, {"ordering, annotation-poor", ordering}},
      {10, {"annotation-availability trend", trend}},
      {11, {"determinism", determinism}},
  };

  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "fast") {
      for (int c = 1; c <= 8; ++c) selected.push_back(c);
    } else if (arg == "experiments") {
      for (int c = 9; c <= 11; ++c) selected.push_back(c);
    } else {
      selected.push_back(std::stoi(arg));
    }
  }
  if (selected.empty()) {
    for (const auto& [id, _] : criteria) selected.push_back(id);
  }

  torch::set_num_threads(1);
  int failures = 0;
  for (int id : selected) {
    const auto& [name, check] = criteria.at(id);
    const auto start = std::chrono::steady_clock::now();
    Verdict v{false, ""};
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("criterion %2d %-30s %s  %s  [%.1f s]\n", id, name.c_str(), v.pass ? "PASS" : "FAIL", v.detail.c_str(), seconds);
    std::fflush(stdout);
    failures += !v.pass;
  }
  return failures == 0 ? 0 : 1;
}
