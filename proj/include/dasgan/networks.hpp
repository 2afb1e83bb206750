#pragma once

// The four networks: two mask-conditioned generators (image + one-hot mask
// in, translated image out) and two discriminators whose first three
// convolutions feed both a patch realism head and a segmentation head.
// Every convolution weight is spectrally normalized.

#include <filesystem>
#include <map>
#include <string>
#include <utility>

#include <torch/torch.h>

#include "dasgan/datamodel.hpp"

namespace dasgan::nn {

// ---------------------------------------------------------------------------
// Spectral normalization

inline constexpr double kSpectralEps = 1e-12;

/// Runs `iters` power iterations on `weight` viewed as (out x rest), updating
/// the persistent left vector `u` in place, and returns weight / sigma.
/// sigma is floored at kSpectralEps, so a zero matrix stays zero.
torch::Tensor spectral_normalize(const torch::Tensor& weight, int iters, torch::Tensor& u);

/// Convolution (or transposed convolution) with a spectrally normalized weight.
/// In training mode each forward runs `power_iterations` steps and updates the
/// stored vectors; in eval mode the stored vectors are reused.
struct SNConv2dOptions {
  SNConv2dOptions(int64_t in, int64_t out, int64_t kernel) : in_channels_(in), out_channels_(out), kernel_size_(kernel) {}
  TORCH_ARG(int64_t, in_channels);
  TORCH_ARG(int64_t, out_channels);
  TORCH_ARG(int64_t, kernel_size);
  TORCH_ARG(int64_t, stride) = 1;
  TORCH_ARG(int64_t, padding) = 0;
  TORCH_ARG(int64_t, output_padding) = 0;
  TORCH_ARG(bool, transposed) = false;
  TORCH_ARG(bool, bias) = true;
  TORCH_ARG(int, power_iterations) = 1;
};

class SNConv2dImpl : public torch::nn::Module {
 public:
  explicit SNConv2dImpl(SNConv2dOptions options);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor normalized_weight();

  SNConv2dOptions options;
  torch::Tensor weight, bias, u, v;
};
TORCH_MODULE(SNConv2d);

// ---------------------------------------------------------------------------
// Self-attention

/// Raw projection parameters; weights are (out x in) 1x1 convolutions.
struct AttentionParams {
  torch::Tensor query_weight, query_bias;  // (c/r x c), (c/r)
  torch::Tensor key_weight, key_bias;      // (c/r x c), (c/r)
  torch::Tensor value_weight, value_bias;  // (c x c), (c)
  torch::Tensor gamma;                     // scalar
};

/// Attention weights (N x HW x HW); row i is the distribution of query i over keys.
torch::Tensor attention_map(const torch::Tensor& features, const AttentionParams& params);

/// features + gamma * attention(features), features laid out N x C x H x W.
torch::Tensor self_attention(const torch::Tensor& features, const AttentionParams& params);

class SelfAttentionImpl : public torch::nn::Module {
 public:
  /// Throws Configuration when channels is not divisible by reduction.
  SelfAttentionImpl(int64_t channels, int64_t reduction);
  torch::Tensor forward(const torch::Tensor& x);
  AttentionParams params();

  SNConv2d query{nullptr}, key{nullptr}, value{nullptr};
  torch::Tensor gamma;
};
TORCH_MODULE(SelfAttention);

// ---------------------------------------------------------------------------
// Generator

struct GeneratorSpec {
  int input_channels = 3 + kNumClasses;
  int base_filters = 16;
  int max_filters = 64;
  int num_downsampling = 2;
  int num_resnet_blocks = 4;
  int stem_kernel = 7;
  bool use_self_attention = true;
  int attention_reduction = 8;

  void validate() const;
};

class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(GeneratorSpec spec);

  /// image: N x 3 x H x W in [0,1]; mask: N x 3 x H x W one-hot. Output in [0,1].
  torch::Tensor forward(const torch::Tensor& image, const torch::Tensor& mask_one_hot);

  const GeneratorSpec& spec() const { return spec_; }

 private:
  GeneratorSpec spec_;
  torch::nn::Sequential encoder{nullptr}, decoder_head{nullptr}, decoder_tail{nullptr};
  SelfAttention attention{nullptr};
};
TORCH_MODULE(Generator);

// ---------------------------------------------------------------------------
// Discriminator

struct DiscriminatorSpec {
  int input_channels = 3;
  int base_filters = 16;
  int max_filters = 64;
  int kernel = 4;  // shared convs and seg-head deconvs; stride 2
  int shared_conv_layers = 3;
  int seg_resnet_blocks = 3;
  int seg_deconv_layers = 3;
  bool use_self_attention = true;
  int attention_reduction = 8;
  bool source_head = true;
  bool source_hidden = true;  // extra 3x3 conv before the realism logits

  void validate() const;
  int downsampling() const { return 1 << shared_conv_layers; }
};

struct DiscriminatorOutput {
  torch::Tensor source;     // N x 1 x h x w realism scores in (0,1); undefined without a source head
  torch::Tensor posterior;  // N x 3 x H x W softmax
};

class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(DiscriminatorSpec spec);

  DiscriminatorOutput forward(const torch::Tensor& image);
  torch::Tensor trunk(const torch::Tensor& image);
  torch::Tensor source_scores(const torch::Tensor& features);
  torch::Tensor segment(const torch::Tensor& features);

  const DiscriminatorSpec& spec() const { return spec_; }

  /// Parameter names per part, for weight-sharing probes.
  std::vector<torch::Tensor> shared_conv_parameters();
  std::vector<torch::Tensor> source_head_parameters();
  std::vector<torch::Tensor> seg_head_parameters();

 private:
  DiscriminatorSpec spec_;
  std::vector<SNConv2d> shared_convs_;
  SelfAttention attention_{nullptr};
  torch::nn::Sequential source_head_{nullptr};
  torch::nn::Sequential seg_blocks_{nullptr};
  torch::nn::Sequential seg_upsample_{nullptr};
};
TORCH_MODULE(Discriminator);

// ---------------------------------------------------------------------------
// Bundle

struct NetworkConfig {
  GeneratorSpec generator;
  DiscriminatorSpec discriminator;
};

struct NetworkBundle {
  Generator g_ab{nullptr};
  Generator g_ba{nullptr};
  Discriminator d_a{nullptr};
  Discriminator d_b{nullptr};

  /// Seeds torch's global generator, then builds the four networks in a fixed order.
  static NetworkBundle create(const NetworkConfig& config, std::uint64_t seed);

  std::vector<std::pair<std::string, torch::nn::Module*>> modules();
  /// "g_ab.encoder.0.weight" -> tensor, for every parameter of every network.
  std::map<std::string, torch::Tensor> parameter_registry();
  std::int64_t parameter_count();

  void to(torch::Dtype dtype);
  void train(bool on = true);
};

std::int64_t parameter_count(torch::nn::Module& module);

void save_module(torch::nn::Module& module, const std::filesystem::path& path);
void load_module(torch::nn::Module& module, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Tensor bridges

/// N x 3 x H x W float tensor from patches of equal shape.
torch::Tensor images_to_tensor(std::span<const ImagePatch> images);
/// N x H x W int64 labels; 255 kept as is.
torch::Tensor masks_to_tensor(std::span<const LabelMask> masks);
/// N x 3 x H x W one-hot from an N x H x W label tensor; 255 gives all-zero.
torch::Tensor one_hot_labels(const torch::Tensor& labels);

ImagePatch tensor_to_image(const torch::Tensor& chw, Domain domain, std::string id);
ClassPosterior tensor_to_posterior(const torch::Tensor& chw);

/// Single-patch wrappers over the batched forwards.
ImagePatch generator_forward(Generator& generator, const ImagePatch& image, const LabelMask& mask);

struct DiscriminatorResult {
  torch::Tensor source_scores;  // h x w
  ClassPosterior posterior;
};
DiscriminatorResult discriminator_forward(Discriminator& discriminator, const ImagePatch& image);

}  // namespace dasgan::nn
