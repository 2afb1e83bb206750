#include "dasgan/inference.hpp"

#include "dasgan/error.hpp"

namespace dasgan::infer {

namespace {

torch::Tensor posterior_of(nn::Discriminator& model, const torch::Tensor& batch) {
  return model->segment(model->trunk(batch));
}

LabelMask labels_from(const torch::Tensor& posterior_chw, Domain domain) {
  const auto idx = posterior_chw.argmax(0).to(torch::kUInt8).contiguous();
  std::vector<std::uint8_t> labels(idx.data_ptr<std::uint8_t>(), idx.data_ptr<std::uint8_t>() + idx.numel());
  return LabelMask(static_cast<int>(idx.size(0)), static_cast<int>(idx.size(1)), std::move(labels), domain);
}

}  // namespace

std::vector<int> tile_offsets(int length, int tile, int overlap) {
  if (length <= tile) return {0};
  const int stride = tile - overlap;
  std::vector<int> out;
  for (int p = 0; p + tile < length; p += stride) out.push_back(p);
  if (out.empty() || out.back() != length - tile) out.push_back(length - tile);
  return out;
}

torch::Tensor predict_posterior(nn::Discriminator& model, const ImagePatch& image, const TileOptions& options) {
  const int tile = options.tile, overlap = options.overlap;
  if (tile <= 0 || overlap < 0 || overlap >= tile) {
    throw Error(ErrorKind::InvalidArgument, "tiling needs tile > overlap >= 0");
  }
  if (tile % model->spec().downsampling() != 0) {
    throw Error(ErrorKind::InvalidArgument, "tile size must be a multiple of " + std::to_string(model->spec().downsampling()));
  }
  torch::NoGradGuard no_grad;
  const int h = image.height(), w = image.width();
  auto x = nn::images_to_tensor(std::span(&image, 1));
  const int ph = std::max(h, tile), pw = std::max(w, tile);
  if (ph != h || pw != w) {
    x = torch::nn::functional::pad(x, torch::nn::functional::PadFuncOptions({0, pw - w, 0, ph - h}).mode(torch::kReplicate));
  }
  auto acc = torch::zeros({kNumClasses, ph, pw}, torch::kFloat32);
  auto hits = torch::zeros({1, ph, pw}, torch::kFloat32);
  for (int y : tile_offsets(ph, tile, overlap)) {
    for (int xo : tile_offsets(pw, tile, overlap)) {
      const auto patch = x.slice(2, y, y + tile).slice(3, xo, xo + tile);
      const auto post = posterior_of(model, patch)[0];
      acc.slice(1, y, y + tile).slice(2, xo, xo + tile) += post;
      hits.slice(1, y, y + tile).slice(2, xo, xo + tile) += 1.0f;
    }
  }
  return (acc / hits).slice(1, 0, h).slice(2, 0, w).contiguous();
}

LabelMask predict_mask(nn::Discriminator& model, const ImagePatch& image, const TileOptions& options) {
  return labels_from(predict_posterior(model, image, options), image.domain());
}

metrics::Confusion confusion_on(nn::Discriminator& model, std::span<const Sample> samples, int batch) {
  torch::NoGradGuard no_grad;
  metrics::Confusion confusion;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch)) {
    const auto end = std::min(samples.size(), start + static_cast<std::size_t>(batch));
    std::vector<ImagePatch> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(samples[i].image);
    const auto post = posterior_of(model, nn::images_to_tensor(images));
    for (std::size_t i = start; i < end; ++i) {
      confusion.add(labels_from(post[static_cast<int64_t>(i - start)], Domain::A), samples[i].mask);
    }
  }
  return confusion;
}

metrics::F1Report evaluate(nn::Discriminator& model, std::span<const Sample> samples, metrics::AbsentClass policy) {
  return metrics::f1_scores(confusion_on(model, samples), policy);
}

}  // namespace dasgan::infer
