#pragma once

// Tiled prediction with the segmentation head of D_A, and pooled F1
// evaluation over a list of samples.

#include <span>

#include "dasgan/datamodel.hpp"
#include "dasgan/metrics.hpp"
#include "dasgan/networks.hpp"

namespace dasgan::infer {

struct TileOptions {
  int tile = 64;
  int overlap = 16;
};

/// Tile start offsets along one axis; the last tile is aligned to the end.
std::vector<int> tile_offsets(int length, int tile, int overlap);

/// 3 x H x W posterior averaged over overlapping tiles. Images smaller than a
/// tile are edge-padded to one tile and cropped back.
torch::Tensor predict_posterior(nn::Discriminator& model, const ImagePatch& image, const TileOptions& options);

LabelMask predict_mask(nn::Discriminator& model, const ImagePatch& image, const TileOptions& options);

/// Pooled confusion over all samples (patch-sized inputs, batched forward).
metrics::Confusion confusion_on(nn::Discriminator& model, std::span<const Sample> samples, int batch = 16);

metrics::F1Report evaluate(nn::Discriminator& model, std::span<const Sample> samples,
                           metrics::AbsentClass policy = metrics::AbsentClass::CountAsOne);

}  // namespace dasgan::infer
