#pragma once

// Procedural two-domain generator. Domain B looks like a CK stain (all
// epithelium brown), domain A like PD-L1 (TC- blue, TC+ brown with membrane
// rims, plus brown non-epithelial speckles). Both are rendered through the
// same Beer-Lambert stain model that ck_pipeline inverts.

#include <cstdint>
#include <vector>

#include "dasgan/ck_pipeline.hpp"
#include "dasgan/datamodel.hpp"

namespace dasgan::synth {

struct StainLevels {
  double hematoxylin = 0.0;
  double dab = 0.0;
};

struct Palette {
  StainLevels background;
  StainLevels epithelium;  // B: CK-positive epithelium; A: TC- epithelium
  StainLevels positive;    // A only: TC+ interior
  double membrane_dab = 0.0;  // A only: extra DAB on TC+ rims
  StainLevels distractor;  // A only: immune / necrotic speckles
  double texture = 0.25;   // relative amplitude of low-frequency modulation
  double intensity_jitter = 0.0;  // per-patch multiplicative spread of all densities
};

Palette default_palette(Domain domain);

struct SynthConfig {
  int patch_size = 64;
  int min_blobs = 1;
  int max_blobs = 4;
  double min_blob_radius = 6.0;
  double max_blob_radius = 14.0;
  double positive_fraction = 0.5;
  /// Expected number of distractor speckles per pixel (domain A).
  double distractor_density = 0.003;
  double noise_sigma = 0.02;
  Palette palette_a = default_palette(Domain::A);
  Palette palette_b = default_palette(Domain::B);
  std::uint64_t seed = 7;

  void validate() const;
};

/// Blob layout shared by both renderers: owner[i] = blob index or -1.
struct Layout {
  int size = 0;
  std::vector<int> owner;
  std::vector<bool> positive;  // per blob, used only by the A renderer
  std::vector<std::uint8_t> rim;  // 1 where a pixel lies within 2 px of its blob boundary
};

/// Per-patch layout seed; domain and stream are mixed in, so A and B never share one.
std::uint64_t layout_seed(const SynthConfig& config, Domain domain, std::uint64_t stream, std::uint64_t index);

struct BSample {
  ImagePatch image;
  ck::BinaryMask mask;
};

struct ASample {
  ImagePatch image;
  LabelMask mask;
};

std::vector<BSample> generate_b(const SynthConfig& config, int n, std::uint64_t stream = 0);
std::vector<ASample> generate_a(const SynthConfig& config, int n, std::uint64_t stream = 1);

/// Ground-truth B->A mapping for one B sample: same layout, each blob recoloured
/// as TC- or TC+ and distractors added. Never used for training.
ASample reference_translation(const SynthConfig& config, std::uint64_t stream, std::uint64_t index, bool positive);

enum class BLabelSource { CkPipeline, GroundTruth };

struct SplitSizes {
  int train_a = 160;
  int train_b = 160;
  int test = 32;
  int validation = 64;
  /// Fraction of train_a patches that keep their labels; the rest become all-255.
  double annotation_fraction = 1.0;
  BLabelSource b_labels = BLabelSource::CkPipeline;
  ck::SegmentOptions ck_options{};
};

DatasetSplit make_splits(const SynthConfig& config, const SplitSizes& sizes);

/// Number of labelled train_a patches for a given size and fraction.
int labelled_count(int train_a, double annotation_fraction);

}  // namespace dasgan::synth
