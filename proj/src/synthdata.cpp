#include "dasgan/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "dasgan/error.hpp"

namespace dasgan::synth {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Wave {
  double kx = 0, ky = 0, phase = 0, amplitude = 0;
  double at(double x, double y) const { return amplitude * std::cos(kx * x + ky * y + phase); }
};

Wave random_wave(std::mt19937_64& rng, double min_wavelength, double max_wavelength, double amplitude) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double wavelength = min_wavelength + (max_wavelength - min_wavelength) * unit(rng);
  const double angle = 2.0 * std::numbers::pi * unit(rng);
  const double k = 2.0 * std::numbers::pi / wavelength;
  return {k * std::cos(angle), k * std::sin(angle), 2.0 * std::numbers::pi * unit(rng), amplitude};
}

struct Blob {
  double cx, cy, radius;
  std::vector<Wave> waves;

  double field(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    double f = 1.0 - (dx * dx + dy * dy) / (radius * radius);
    for (const auto& w : waves) f += w.at(x, y);
    return f;
  }
};

Layout make_layout(const SynthConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> count(config.min_blobs, config.max_blobs);
  const int size = config.patch_size;
  const int n = count(rng);

  std::vector<Blob> blobs;
  Layout layout;
  layout.size = size;
  for (int i = 0; i < n; ++i) {
    Blob b;
    b.cx = unit(rng) * size;
    b.cy = unit(rng) * size;
    b.radius = config.min_blob_radius + (config.max_blob_radius - config.min_blob_radius) * unit(rng);
    for (int w = 0; w < 4; ++w) b.waves.push_back(random_wave(rng, b.radius, 2.5 * b.radius, 0.2 * unit(rng)));
    blobs.push_back(std::move(b));
    layout.positive.push_back(unit(rng) < config.positive_fraction);
  }

  layout.owner.assign(static_cast<std::size_t>(size) * size, -1);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double best = 0.0;
      int owner = -1;
      for (int i = 0; i < n; ++i) {
        const double f = blobs[i].field(x + 0.5, y + 0.5);
        if (f > best) best = f, owner = i;
      }
      layout.owner[static_cast<std::size_t>(y) * size + x] = owner;
    }
  }

  layout.rim.assign(layout.owner.size(), 0);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const int own = layout.owner[static_cast<std::size_t>(y) * size + x];
      if (own < 0) continue;
      bool rim = false;
      for (int dy = -2; dy <= 2 && !rim; ++dy) {
        for (int dx = -2; dx <= 2 && !rim; ++dx) {
          if (dx * dx + dy * dy > 4) continue;
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= size || xx < 0 || xx >= size) continue;
          rim = layout.owner[static_cast<std::size_t>(yy) * size + xx] != own;
        }
      }
      layout.rim[static_cast<std::size_t>(y) * size + x] = rim ? 1 : 0;
    }
  }
  return layout;
}

/// Low-frequency stain modulation in [-1, 1].
std::vector<double> make_texture(int size, std::mt19937_64& rng) {
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) waves.push_back(random_wave(rng, 8.0, 32.0, 1.0 / 3.0));
  std::vector<double> t(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double v = 0.0;
      for (const auto& w : waves) v += w.at(x, y);
      t[static_cast<std::size_t>(y) * size + x] = v;
    }
  }
  return t;
}

class Renderer {
 public:
  Renderer(const SynthConfig& config, const Palette& palette, std::mt19937_64& rng)
      : config_(config), palette_(palette), rng_(rng), stains_(ck::StainMatrix::hematoxylin_dab()) {
    texture_ = make_texture(config.patch_size, rng_);
    std::uniform_real_distribution<double> jitter(1.0 - palette.intensity_jitter, 1.0 + palette.intensity_jitter);
    scale_ = palette.intensity_jitter > 0.0 ? jitter(rng_) : 1.0;
  }

  /// levels[i] holds the (H, DAB) density of pixel i before modulation.
  std::vector<float> render(const std::vector<StainLevels>& levels) {
    std::normal_distribution<double> noise(0.0, config_.noise_sigma);
    std::vector<float> pixels(levels.size() * 3);
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const double m = scale_ * (1.0 + palette_.texture * texture_[i]);
      const auto rgb = ck::compose_stains({levels[i].hematoxylin * m, levels[i].dab * m, 0.0}, stains_);
      for (int c = 0; c < 3; ++c) {
        double v = rgb[c];
        if (config_.noise_sigma > 0.0) v += noise(rng_);
        pixels[i * 3 + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
    return pixels;
  }

 private:
  const SynthConfig& config_;
  const Palette& palette_;
  std::mt19937_64& rng_;
  ck::StainMatrix stains_;
  std::vector<double> texture_;
  double scale_ = 1.0;
};

char split_tag(std::uint64_t stream) {
  switch (stream) {
    case 0: return 'b';
    case 1: return 't';
    case 2: return 's';
    case 3: return 'v';
    default: return 'x';
  }
}

std::string patch_id(Domain domain, std::uint64_t stream, std::uint64_t index) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s-%c%llu-%05llu", std::string(to_string(domain)).c_str(), split_tag(stream),
                static_cast<unsigned long long>(stream), static_cast<unsigned long long>(index));
  return buf;
}

BSample render_b(const SynthConfig& config, std::uint64_t stream, std::uint64_t index) {
  std::mt19937_64 rng(layout_seed(config, Domain::B, stream, index));
  const Layout layout = make_layout(config, rng);
  const auto& pal = config.palette_b;
  std::vector<StainLevels> levels(layout.owner.size());
  ck::BinaryMask mask = ck::BinaryMask::empty(layout.size, layout.size);
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const bool epi = layout.owner[i] >= 0;
    levels[i] = epi ? pal.epithelium : pal.background;
    mask.values[i] = epi ? 1 : 0;
  }
  Renderer renderer(config, pal, rng);
  auto pixels = renderer.render(levels);
  return {ImagePatch(layout.size, layout.size, std::move(pixels), Domain::B, patch_id(Domain::B, stream, index)), std::move(mask)};
}

ASample render_a(const SynthConfig& config, const Layout& layout, std::mt19937_64& rng, std::string id) {
  const auto& pal = config.palette_a;
  const int size = layout.size;
  std::vector<StainLevels> levels(layout.owner.size());
  std::vector<std::uint8_t> labels(layout.owner.size());
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const int own = layout.owner[i];
    if (own < 0) {
      levels[i] = pal.background;
      labels[i] = label::kOther;
    } else if (layout.positive[own]) {
      levels[i] = pal.positive;
      if (layout.rim[i]) levels[i].dab += pal.membrane_dab;
      labels[i] = label::kTcPositive;
    } else {
      levels[i] = pal.epithelium;
      labels[i] = label::kTcNegative;
    }
  }

  if (config.distractor_density > 0.0) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::poisson_distribution<int> poisson(config.distractor_density * size * size);
    const int n = std::max(1, poisson(rng));
    for (int d = 0; d < n; ++d) {
      const double cx = unit(rng) * size, cy = unit(rng) * size;
      const double r = 1.0 + 1.5 * unit(rng);
      for (int y = std::max(0, static_cast<int>(cy - r) - 1); y <= std::min(size - 1, static_cast<int>(cy + r) + 1); ++y) {
        for (int x = std::max(0, static_cast<int>(cx - r) - 1); x <= std::min(size - 1, static_cast<int>(cx + r) + 1); ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const auto i = static_cast<std::size_t>(y) * size + x;
          if (dx * dx + dy * dy <= r * r && layout.owner[i] < 0) levels[i] = pal.distractor;
        }
      }
    }
  }

  Renderer renderer(config, pal, rng);
  auto pixels = renderer.render(levels);
  return {ImagePatch(size, size, std::move(pixels), Domain::A, std::move(id)), LabelMask(size, size, std::move(labels), Domain::A)};
}

}  // namespace

Palette default_palette(Domain domain) {
  Palette p;
  if (domain == Domain::B) {
    p.background = {0.18, 0.0};
    p.epithelium = {0.25, 0.65};
    p.texture = 0.25;
  } else {
    p.background = {0.10, 0.02};
    p.epithelium = {0.55, 0.0};
    p.positive = {0.30, 0.30};
    p.membrane_dab = 0.45;
    p.distractor = {0.20, 0.80};
    p.texture = 0.25;
    p.intensity_jitter = 0.2;
  }
  return p;
}

void SynthConfig::validate() const {
  if (patch_size < 4) throw Error(ErrorKind::Configuration, "patch_size must be >= 4");
  if (min_blobs < 0 || max_blobs < min_blobs) throw Error(ErrorKind::Configuration, "invalid blob count range");
  if (!(min_blob_radius > 0.0) || max_blob_radius < min_blob_radius) throw Error(ErrorKind::Configuration, "invalid blob radius range");
  if (!(positive_fraction >= 0.0 && positive_fraction <= 1.0)) throw Error(ErrorKind::Configuration, "positive_fraction must be in [0,1]");
  if (!(noise_sigma >= 0.0)) throw Error(ErrorKind::Configuration, "noise_sigma must be >= 0");
  if (!(distractor_density >= 0.0)) throw Error(ErrorKind::Configuration, "distractor_density must be >= 0");
}

std::uint64_t layout_seed(const SynthConfig& config, Domain domain, std::uint64_t stream, std::uint64_t index) {
  std::uint64_t h = splitmix64(config.seed);
  h = splitmix64(h ^ (domain == Domain::A ? 0xA11CEULL : 0xB0B5ULL));
  h = splitmix64(h ^ stream);
  return splitmix64(h ^ index);
}

std::vector<BSample> generate_b(const SynthConfig& config, int n, std::uint64_t stream) {
  config.validate();
  if (n < 1) throw Error(ErrorKind::InvalidArgument, "n must be >= 1");
  std::vector<BSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(render_b(config, stream, static_cast<std::uint64_t>(i)));
  return out;
}

std::vector<ASample> generate_a(const SynthConfig& config, int n, std::uint64_t stream) {
  config.validate();
  if (n < 1) throw Error(ErrorKind::InvalidArgument, "n must be >= 1");
  std::vector<ASample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::mt19937_64 rng(layout_seed(config, Domain::A, stream, static_cast<std::uint64_t>(i)));
    const Layout layout = make_layout(config, rng);
    out.push_back(render_a(config, layout, rng, patch_id(Domain::A, stream, static_cast<std::uint64_t>(i))));
  }
  return out;
}

ASample reference_translation(const SynthConfig& config, std::uint64_t stream, std::uint64_t index, bool positive) {
  config.validate();
  std::mt19937_64 rng(layout_seed(config, Domain::B, stream, index));
  Layout layout = make_layout(config, rng);
  std::fill(layout.positive.begin(), layout.positive.end(), positive);
  std::mt19937_64 render_rng(splitmix64(layout_seed(config, Domain::B, stream, index) ^ 0x7e7eULL));
  return render_a(config, layout, render_rng, patch_id(Domain::A, stream, index) + (positive ? "-ref+" : "-ref-"));
}

int labelled_count(int train_a, double annotation_fraction) {
  const double f = std::clamp(annotation_fraction, 0.0, 1.0);
  return std::clamp(static_cast<int>(std::lround(f * train_a)), 0, train_a);
}

DatasetSplit make_splits(const SynthConfig& config, const SplitSizes& sizes) {
  if (!(sizes.annotation_fraction >= 0.0 && sizes.annotation_fraction <= 1.0)) {
    throw Error(ErrorKind::Configuration, "annotation_fraction must be in [0,1]");
  }
  DatasetSplit split;
  const auto stains = ck::StainMatrix::hematoxylin_dab();

  if (sizes.train_b > 0) {
    for (auto& s : generate_b(config, sizes.train_b, 0)) {
      ck::BinaryMask mask = sizes.b_labels == BLabelSource::CkPipeline ? ck::segment_ck(s.image, stains, sizes.ck_options) : s.mask;
      split.train_b.push_back({std::move(s.image), ck::to_label_mask(mask, Domain::B)});
    }
  }

  auto take_a = [&](int n, std::uint64_t stream, std::vector<Sample>& dst) {
    if (n <= 0) return;
    for (auto& s : generate_a(config, n, stream)) dst.push_back({std::move(s.image), std::move(s.mask)});
  };
  take_a(sizes.train_a, 1, split.train_a);
  take_a(sizes.test, 2, split.test);
  take_a(sizes.validation, 3, split.validation);

  const int keep = labelled_count(sizes.train_a, sizes.annotation_fraction);
  for (std::size_t i = static_cast<std::size_t>(keep); i < split.train_a.size(); ++i) {
    auto& m = split.train_a[i].mask;
    m = LabelMask::filled(m.height(), m.width(), label::kIgnore, Domain::A);
  }
  split.validate();
  return split;
}

}  // namespace dasgan::synth
