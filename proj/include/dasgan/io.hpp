#pragma once

// File formats: 8-bit RGB PNG patches, single-channel 8-bit PNG masks with
// values {0,1,2,255}, and a JSON split manifest listing the pairs.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dasgan/datamodel.hpp"

namespace dasgan::io {

namespace fs = std::filesystem;

inline constexpr const char* kManifestFormat = "dasgan-split-manifest";
inline constexpr int kManifestVersion = 1;

void write_image(const fs::path& path, const ImagePatch& image);
ImagePatch read_image(const fs::path& path, Domain domain, std::string id = {});

void write_mask(const fs::path& path, const LabelMask& mask);
LabelMask read_mask(const fs::path& path, Domain domain);

/// RGB overlay: Other green, TC- red, TC+ blue, blended over the image.
void write_overlay(const fs::path& path, const ImagePatch& image, const LabelMask& mask, float alpha = 0.4f);

struct ManifestEntry {
  std::string id;
  std::string image;  // relative to the manifest directory
  std::string mask;
  Domain domain = Domain::A;
  std::string split;  // train_a | train_b | test | validation
};

/// Writes every sample of the split under `dir` and a manifest.json next to them.
void write_split(const fs::path& dir, const DatasetSplit& split);
std::vector<ManifestEntry> read_manifest(const fs::path& manifest_path);
DatasetSplit read_split(const fs::path& manifest_path);

/// Pretty-printed JSON with a trailing newline.
void write_json(const fs::path& path, const nlohmann::json& value);
nlohmann::json read_json(const fs::path& path);

/// FNV-1a 64-bit of the compact dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& value);

/// PNG files in a directory, sorted by name.
std::vector<fs::path> list_pngs(const fs::path& dir);

}  // namespace dasgan::io
