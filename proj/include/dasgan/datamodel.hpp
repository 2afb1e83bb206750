#pragma once

// Value types shared by every stage: image patches, label masks, class
// posteriors and dataset splits. All pixel data is stored row-major with the
// channel index fastest (H x W x C).

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dasgan {

/// A = PD-L1-like target domain, B = CK-like source domain.
enum class Domain { A, B };

std::string_view to_string(Domain domain);
Domain domain_from_string(std::string_view text);
Domain flip(Domain domain);

/// Class labels. Epithelium is the union of TcNegative and TcPositive.
namespace label {
inline constexpr std::uint8_t kOther = 0;
inline constexpr std::uint8_t kTcNegative = 1;
inline constexpr std::uint8_t kTcPositive = 2;
inline constexpr std::uint8_t kIgnore = 255;
}  // namespace label

inline constexpr int kNumClasses = 3;

bool is_valid_label(std::uint8_t value);

/// RGB patch with values in [0,1].
class ImagePatch {
 public:
  ImagePatch() = default;
  ImagePatch(int height, int width, std::vector<float> pixels, Domain domain, std::string id);

  /// Blank patch filled with `value`.
  static ImagePatch filled(int height, int width, float value, Domain domain, std::string id);

  int height() const { return height_; }
  int width() const { return width_; }
  Domain domain() const { return domain_; }
  const std::string& id() const { return id_; }
  std::span<const float> pixels() const { return pixels_; }

  float at(int y, int x, int c) const { return pixels_[(static_cast<std::size_t>(y) * width_ + x) * 3 + c]; }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<float> pixels_;
  Domain domain_ = Domain::A;
  std::string id_;
};

/// Integer class map over {0,1,2,255}.
class LabelMask {
 public:
  LabelMask() = default;
  LabelMask(int height, int width, std::vector<std::uint8_t> labels, Domain domain);

  static LabelMask filled(int height, int width, std::uint8_t value, Domain domain);

  int height() const { return height_; }
  int width() const { return width_; }
  Domain domain() const { return domain_; }
  std::span<const std::uint8_t> labels() const { return labels_; }
  std::uint8_t at(int y, int x) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }

  std::size_t count(std::uint8_t value) const;
  bool operator==(const LabelMask&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> labels_;
  Domain domain_ = Domain::A;
};

/// Per-pixel distribution over {Other, TC-, TC+}.
class ClassPosterior {
 public:
  ClassPosterior() = default;
  /// Throws InvalidInput when a pixel is negative or does not sum to 1 within 1e-5.
  ClassPosterior(int height, int width, std::vector<float> probs);

  int height() const { return height_; }
  int width() const { return width_; }
  std::span<const float> probs() const { return probs_; }
  float at(int y, int x, int c) const { return probs_[(static_cast<std::size_t>(y) * width_ + x) * kNumClasses + c]; }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<float> probs_;
};

struct Sample {
  ImagePatch image;
  LabelMask mask;
};

/// Domain-B masks hold the CK epithelium as label 1 (0 elsewhere, 255 unannotated);
/// the two conditioned variants are derived at sampling time.
struct DatasetSplit {
  std::vector<Sample> train_a;
  std::vector<Sample> train_b;
  std::vector<Sample> test;
  std::vector<Sample> validation;

  /// Throws InvalidInput when an id appears twice across splits.
  void validate() const;
};

void require_same_shape(const ImagePatch& image, const LabelMask& mask);
void require_same_shape(const LabelMask& a, const LabelMask& b);

/// One-hot encoding, H x W x num_classes. Ignore pixels are all-zero.
std::vector<float> encode_one_hot(const LabelMask& mask, int num_classes);

/// Per-pixel argmax; ties go to the smallest class index.
LabelMask argmax_mask(const ClassPosterior& posterior, Domain domain = Domain::A);

}  // namespace dasgan
