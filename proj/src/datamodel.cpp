#include "dasgan/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "dasgan/error.hpp"

namespace dasgan {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidLabel: return "invalid_label";
    case ErrorKind::InvalidInput: return "invalid_input";
    case ErrorKind::ShapeMismatch: return "shape_mismatch";
    case ErrorKind::InvalidArgument: return "invalid_argument";
    case ErrorKind::Configuration: return "configuration";
    case ErrorKind::DegenerateInput: return "degenerate_input";
    case ErrorKind::TrainingDivergence: return "training_divergence";
    case ErrorKind::NoEpithelium: return "no_epithelium";
    case ErrorKind::UndefinedMetric: return "undefined_metric";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

std::string_view to_string(Domain domain) { return domain == Domain::A ? "A" : "B"; }

Domain domain_from_string(std::string_view text) {
  if (text == "A" || text == "a") return Domain::A;
  if (text == "B" || text == "b") return Domain::B;
  throw Error(ErrorKind::InvalidInput, "unknown domain '" + std::string(text) + "'");
}

Domain flip(Domain domain) { return domain == Domain::A ? Domain::B : Domain::A; }

bool is_valid_label(std::uint8_t value) { return value <= label::kTcPositive || value == label::kIgnore; }

namespace {

void require_positive_shape(int height, int width) {
  if (height <= 0 || width <= 0) {
    throw Error(ErrorKind::InvalidInput, "non-positive image shape " + std::to_string(height) + "x" + std::to_string(width));
  }
}

}  // namespace

ImagePatch::ImagePatch(int height, int width, std::vector<float> pixels, Domain domain, std::string id)
    : height_(height), width_(width), pixels_(std::move(pixels)), domain_(domain), id_(std::move(id)) {
  require_positive_shape(height, width);
  if (pixels_.size() != static_cast<std::size_t>(height) * width * 3) {
    throw Error(ErrorKind::InvalidInput, "pixel buffer does not match " + std::to_string(height) + "x" + std::to_string(width) + "x3");
  }
  for (float v : pixels_) {
    if (!(v >= 0.0f && v <= 1.0f)) throw Error(ErrorKind::InvalidInput, "pixel value outside [0,1] in patch '" + id_ + "'");
  }
}

ImagePatch ImagePatch::filled(int height, int width, float value, Domain domain, std::string id) {
  return ImagePatch(height, width, std::vector<float>(static_cast<std::size_t>(height) * width * 3, value), domain, std::move(id));
}

LabelMask::LabelMask(int height, int width, std::vector<std::uint8_t> labels, Domain domain)
    : height_(height), width_(width), labels_(std::move(labels)), domain_(domain) {
  require_positive_shape(height, width);
  if (labels_.size() != static_cast<std::size_t>(height) * width) {
    throw Error(ErrorKind::InvalidInput, "label buffer does not match mask shape");
  }
  for (auto v : labels_) {
    if (!is_valid_label(v)) throw Error(ErrorKind::InvalidLabel, "label " + std::to_string(v) + " not in {0,1,2,255}");
  }
}

LabelMask LabelMask::filled(int height, int width, std::uint8_t value, Domain domain) {
  return LabelMask(height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width, value), domain);
}

std::size_t LabelMask::count(std::uint8_t value) const {
  return static_cast<std::size_t>(std::count(labels_.begin(), labels_.end(), value));
}

ClassPosterior::ClassPosterior(int height, int width, std::vector<float> probs)
    : height_(height), width_(width), probs_(std::move(probs)) {
  require_positive_shape(height, width);
  if (probs_.size() != static_cast<std::size_t>(height) * width * kNumClasses) {
    throw Error(ErrorKind::InvalidInput, "posterior buffer does not match shape");
  }
  for (std::size_t i = 0; i < probs_.size(); i += kNumClasses) {
    double sum = 0.0;
    for (int c = 0; c < kNumClasses; ++c) {
      if (!(probs_[i + c] >= 0.0f)) throw Error(ErrorKind::InvalidInput, "negative class probability");
      sum += probs_[i + c];
    }
    if (std::abs(sum - 1.0) > 1e-5) throw Error(ErrorKind::InvalidInput, "class probabilities do not sum to 1");
  }
}

void DatasetSplit::validate() const {
  std::unordered_set<std::string> seen;
  for (const auto* part : {&train_a, &train_b, &test, &validation}) {
    for (const auto& s : *part) {
      if (!seen.insert(s.image.id()).second) {
        throw Error(ErrorKind::InvalidInput, "patch id '" + s.image.id() + "' appears more than once");
      }
    }
  }
}

void require_same_shape(const ImagePatch& image, const LabelMask& mask) {
  if (image.height() != mask.height() || image.width() != mask.width()) {
    throw Error(ErrorKind::ShapeMismatch, "image " + std::to_string(image.height()) + "x" + std::to_string(image.width()) +
                                              " vs mask " + std::to_string(mask.height()) + "x" + std::to_string(mask.width()));
  }
}

void require_same_shape(const LabelMask& a, const LabelMask& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw Error(ErrorKind::ShapeMismatch, "mask " + std::to_string(a.height()) + "x" + std::to_string(a.width()) + " vs mask " +
                                              std::to_string(b.height()) + "x" + std::to_string(b.width()));
  }
}

std::vector<float> encode_one_hot(const LabelMask& mask, int num_classes) {
  if (num_classes <= 0) throw Error(ErrorKind::InvalidArgument, "num_classes must be positive");
  auto labels = mask.labels();
  std::vector<float> out(labels.size() * static_cast<std::size_t>(num_classes), 0.0f);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto v = labels[i];
    if (v == label::kIgnore) continue;
    if (v >= num_classes) {
      throw Error(ErrorKind::InvalidLabel, "label " + std::to_string(v) + " >= num_classes " + std::to_string(num_classes));
    }
    out[i * num_classes + v] = 1.0f;
  }
  return out;
}

LabelMask argmax_mask(const ClassPosterior& posterior, Domain domain) {
  auto probs = posterior.probs();
  std::vector<std::uint8_t> labels(probs.size() / kNumClasses);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    int best = 0;
    for (int c = 1; c < kNumClasses; ++c) {
      if (probs[i * kNumClasses + c] > probs[i * kNumClasses + best]) best = c;
    }
    labels[i] = static_cast<std::uint8_t>(best);
  }
  return LabelMask(posterior.height(), posterior.width(), std::move(labels), domain);
}

}  // namespace dasgan
