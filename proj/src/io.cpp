#include "dasgan/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "dasgan/error.hpp"

namespace dasgan::io {

namespace {

std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void imwrite_or_throw(const fs::path& path, const cv::Mat& mat) {
  ensure_parent(path);
  // fixed compression level keeps files byte-identical across runs
  const std::vector<int> params{cv::IMWRITE_PNG_COMPRESSION, 6};
  if (!cv::imwrite(path.string(), mat, params)) throw Error(ErrorKind::Io, "cannot write " + path.string());
}

cv::Mat imread_or_throw(const fs::path& path, int flags) {
  cv::Mat mat = cv::imread(path.string(), flags);
  if (mat.empty()) throw Error(ErrorKind::Io, "cannot read image " + path.string());
  return mat;
}

std::string split_name(int index) {
  static const char* names[] = {"train_a", "train_b", "test", "validation"};
  return names[index];
}

}  // namespace

void write_image(const fs::path& path, const ImagePatch& image) {
  cv::Mat mat(image.height(), image.width(), CV_8UC3);
  for (int y = 0; y < image.height(); ++y) {
    auto* row = mat.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.width(); ++x) {
      // OpenCV stores BGR
      row[x] = cv::Vec3b(to_byte(image.at(y, x, 2)), to_byte(image.at(y, x, 1)), to_byte(image.at(y, x, 0)));
    }
  }
  imwrite_or_throw(path, mat);
}

ImagePatch read_image(const fs::path& path, Domain domain, std::string id) {
  const cv::Mat mat = imread_or_throw(path, cv::IMREAD_COLOR);
  std::vector<float> pixels(static_cast<std::size_t>(mat.rows) * mat.cols * 3);
  for (int y = 0; y < mat.rows; ++y) {
    const auto* row = mat.ptr<cv::Vec3b>(y);
    for (int x = 0; x < mat.cols; ++x) {
      const auto i = (static_cast<std::size_t>(y) * mat.cols + x) * 3;
      pixels[i + 0] = row[x][2] / 255.0f;
      pixels[i + 1] = row[x][1] / 255.0f;
      pixels[i + 2] = row[x][0] / 255.0f;
    }
  }
  if (id.empty()) id = path.stem().string();
  return ImagePatch(mat.rows, mat.cols, std::move(pixels), domain, std::move(id));
}

void write_mask(const fs::path& path, const LabelMask& mask) {
  cv::Mat mat(mask.height(), mask.width(), CV_8UC1);
  auto labels = mask.labels();
  std::copy(labels.begin(), labels.end(), mat.ptr<std::uint8_t>(0));
  imwrite_or_throw(path, mat);
}

LabelMask read_mask(const fs::path& path, Domain domain) {
  const cv::Mat mat = imread_or_throw(path, cv::IMREAD_UNCHANGED);
  if (mat.type() != CV_8UC1) throw Error(ErrorKind::InvalidInput, "mask " + path.string() + " is not single-channel 8-bit");
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(mat.rows) * mat.cols);
  for (int y = 0; y < mat.rows; ++y) std::copy_n(mat.ptr<std::uint8_t>(y), mat.cols, labels.begin() + static_cast<std::ptrdiff_t>(y) * mat.cols);
  return LabelMask(mat.rows, mat.cols, std::move(labels), domain);
}

void write_overlay(const fs::path& path, const ImagePatch& image, const LabelMask& mask, float alpha) {
  require_same_shape(image, mask);
  static const float colors[3][3] = {{0.0f, 0.8f, 0.0f}, {0.9f, 0.0f, 0.0f}, {0.0f, 0.0f, 0.9f}};
  std::vector<float> px(image.pixels().begin(), image.pixels().end());
  auto labels = mask.labels();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > label::kTcPositive) continue;
    for (int c = 0; c < 3; ++c) px[i * 3 + c] = (1.0f - alpha) * px[i * 3 + c] + alpha * colors[labels[i]][c];
  }
  write_image(path, ImagePatch(image.height(), image.width(), std::move(px), image.domain(), image.id()));
}

void write_split(const fs::path& dir, const DatasetSplit& split) {
  fs::create_directories(dir);
  nlohmann::json entries = nlohmann::json::array();
  const std::vector<const std::vector<Sample>*> parts{&split.train_a, &split.train_b, &split.test, &split.validation};
  for (int p = 0; p < 4; ++p) {
    const std::string name = split_name(p);
    for (const auto& s : *parts[p]) {
      const std::string image_rel = name + "/images/" + s.image.id() + ".png";
      const std::string mask_rel = name + "/masks/" + s.image.id() + ".png";
      write_image(dir / image_rel, s.image);
      write_mask(dir / mask_rel, s.mask);
      entries.push_back({{"id", s.image.id()},
                         {"image", image_rel},
                         {"mask", mask_rel},
                         {"domain", std::string(to_string(s.image.domain()))},
                         {"split", name}});
    }
  }
  write_json(dir / "manifest.json", {{"format", kManifestFormat}, {"version", kManifestVersion}, {"entries", entries}});
}

std::vector<ManifestEntry> read_manifest(const fs::path& manifest_path) {
  const auto j = read_json(manifest_path);
  try {
    if (j.at("format").get<std::string>() != kManifestFormat) throw Error(ErrorKind::InvalidInput, "not a split manifest: " + manifest_path.string());
    if (j.at("version").get<int>() != kManifestVersion) throw Error(ErrorKind::InvalidInput, "unsupported manifest version");
    std::vector<ManifestEntry> out;
    for (const auto& e : j.at("entries")) {
      out.push_back({e.at("id").get<std::string>(), e.at("image").get<std::string>(), e.at("mask").get<std::string>(),
                     domain_from_string(e.at("domain").get<std::string>()), e.at("split").get<std::string>()});
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidInput, std::string("malformed manifest: ") + e.what());
  }
}

DatasetSplit read_split(const fs::path& manifest_path) {
  const fs::path base = manifest_path.parent_path();
  DatasetSplit split;
  for (const auto& e : read_manifest(manifest_path)) {
    Sample s{read_image(base / e.image, e.domain, e.id), read_mask(base / e.mask, e.domain)};
    require_same_shape(s.image, s.mask);
    if (e.split == "train_a") split.train_a.push_back(std::move(s));
    else if (e.split == "train_b") split.train_b.push_back(std::move(s));
    else if (e.split == "test") split.test.push_back(std::move(s));
    else if (e.split == "validation") split.validation.push_back(std::move(s));
    else throw Error(ErrorKind::InvalidInput, "unknown split '" + e.split + "'");
  }
  split.validate();
  return split;
}

void write_json(const fs::path& path, const nlohmann::json& value) {
  ensure_parent(path);
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << value.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidInput, "malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::string config_hash(const nlohmann::json& value) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : value.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<fs::path> list_pngs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::Io, "not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace dasgan::io
