#include "dasgan/networks.hpp"

#include "dasgan/error.hpp"

namespace dasgan::nn {

namespace F = torch::nn::functional;

// ---------------------------------------------------------------------------
// Spectral normalization

namespace {

torch::Tensor unit(const torch::Tensor& x) { return F::normalize(x, F::NormalizeFuncOptions().dim(0).eps(kSpectralEps)); }

void power_iterate(const torch::Tensor& w2, int iters, torch::Tensor& u, torch::Tensor& v) {
  torch::NoGradGuard no_grad;
  for (int i = 0; i < iters; ++i) {
    v = unit(torch::mv(w2.t(), u));
    u = unit(torch::mv(w2, v));
  }
}

constexpr int kInitialPowerIterations = 5;

}  // namespace

torch::Tensor spectral_normalize(const torch::Tensor& weight, int iters, torch::Tensor& u) {
  if (iters < 1) throw Error(ErrorKind::InvalidArgument, "spectral_normalize needs at least one power iteration");
  const auto w2 = weight.reshape({weight.size(0), -1});
  if (!u.defined() || u.numel() != w2.size(0)) throw Error(ErrorKind::InvalidInput, "power-iteration vector does not match the weight rows");
  torch::Tensor v;
  torch::Tensor uu = u.detach().clone();
  power_iterate(w2.detach(), iters, uu, v);
  u.copy_(uu);
  const auto sigma = torch::dot(uu, torch::mv(w2, v)).clamp_min(kSpectralEps);
  return weight / sigma;
}

SNConv2dImpl::SNConv2dImpl(SNConv2dOptions opts) : options(std::move(opts)) {
  const auto k = options.kernel_size();
  torch::nn::init::FanModeType fan_mode = torch::kFanIn;
  if (options.transposed()) {
    weight = register_parameter("weight", torch::empty({options.in_channels(), options.out_channels(), k, k}));
    fan_mode = torch::kFanOut;
  } else {
    weight = register_parameter("weight", torch::empty({options.out_channels(), options.in_channels(), k, k}));
  }
  torch::nn::init::kaiming_uniform_(weight, std::sqrt(5.0), fan_mode);
  if (options.bias()) bias = register_parameter("bias", torch::zeros({options.out_channels()}));
  const auto rows = weight.size(0);
  const auto cols = weight.numel() / rows;
  // Start u, v aligned with the initial weight so that eval-mode forwards of an
  // untrained layer see a positive sigma.
  torch::Tensor uu = unit(torch::randn({rows})), vv;
  power_iterate(weight.detach().reshape({rows, cols}), kInitialPowerIterations, uu, vv);
  u = register_buffer("u", uu);
  v = register_buffer("v", vv);
}

torch::Tensor SNConv2dImpl::normalized_weight() {
  const auto w2 = weight.reshape({weight.size(0), -1});
  if (is_training() && torch::GradMode::is_enabled()) {
    torch::Tensor uu = u.detach().clone(), vv = v.detach().clone();
    power_iterate(w2.detach(), options.power_iterations(), uu, vv);
    torch::NoGradGuard no_grad;
    u.copy_(uu);
    v.copy_(vv);
  }
  // Snapshots: later forwards update u and v in place while this graph is still alive.
  const auto sigma = torch::dot(u.clone(), torch::mv(w2, v.clone())).clamp_min(kSpectralEps);
  return weight / sigma;
}

torch::Tensor SNConv2dImpl::forward(const torch::Tensor& x) {
  const auto w = normalized_weight();
  if (options.transposed()) {
    return F::conv_transpose2d(x, w, F::ConvTranspose2dFuncOptions()
                                          .bias(bias)
                                          .stride(options.stride())
                                          .padding(options.padding())
                                          .output_padding(options.output_padding()));
  }
  return F::conv2d(x, w, F::Conv2dFuncOptions().bias(bias).stride(options.stride()).padding(options.padding()));
}

// ---------------------------------------------------------------------------
// Self-attention

namespace {

struct Projections {
  torch::Tensor query, key, value;  // N x c' x L, N x c' x L, N x C x L
};

Projections project(const torch::Tensor& features, const AttentionParams& p) {
  if (features.dim() != 4) throw Error(ErrorKind::InvalidInput, "self-attention expects N x C x H x W features");
  const auto n = features.size(0), c = features.size(1);
  const auto flat = features.reshape({n, c, -1});
  auto proj = [&](const torch::Tensor& w, const torch::Tensor& b) {
    auto out = torch::matmul(w, flat);
    if (b.defined()) out = out + b.view({1, -1, 1});
    return out;
  };
  return {proj(p.query_weight, p.query_bias), proj(p.key_weight, p.key_bias), proj(p.value_weight, p.value_bias)};
}

torch::Tensor attention_from(const Projections& pr) {
  const auto energy = torch::bmm(pr.query.transpose(1, 2), pr.key);  // N x L(query) x L(key)
  return torch::softmax(energy, -1);
}

}  // namespace

torch::Tensor attention_map(const torch::Tensor& features, const AttentionParams& params) {
  return attention_from(project(features, params));
}

torch::Tensor self_attention(const torch::Tensor& features, const AttentionParams& params) {
  const auto pr = project(features, params);
  const auto attn = attention_from(pr);
  const auto out = torch::bmm(pr.value, attn.transpose(1, 2)).view_as(features);
  return features + params.gamma * out;
}

SelfAttentionImpl::SelfAttentionImpl(int64_t channels, int64_t reduction) {
  if (reduction < 1 || channels % reduction != 0) {
    throw Error(ErrorKind::Configuration,
                "self-attention channels " + std::to_string(channels) + " not divisible by reduction " + std::to_string(reduction));
  }
  const auto inner = channels / reduction;
  query = register_module("query", SNConv2d(SNConv2dOptions(channels, inner, 1)));
  key = register_module("key", SNConv2d(SNConv2dOptions(channels, inner, 1)));
  value = register_module("value", SNConv2d(SNConv2dOptions(channels, channels, 1)));
  gamma = register_parameter("gamma", torch::zeros({}));
}

AttentionParams SelfAttentionImpl::params() {
  auto flat = [](const torch::Tensor& w) { return w.reshape({w.size(0), w.size(1)}); };
  return {flat(query->normalized_weight()), query->bias, flat(key->normalized_weight()), key->bias,
          flat(value->normalized_weight()), value->bias, gamma};
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x) { return self_attention(x, params()); }

// ---------------------------------------------------------------------------
// Building blocks

namespace {

int filters_at(int base, int max_filters, int level) { return std::min(base << level, max_filters); }

/// Generator residual block: reflect-pad, conv, instance norm, ReLU, twice.
class GenResBlockImpl : public torch::nn::Module {
 public:
  explicit GenResBlockImpl(int64_t channels) {
    body = register_module("body", torch::nn::Sequential(torch::nn::ReflectionPad2d(1), SNConv2d(SNConv2dOptions(channels, channels, 3)),
                                                         torch::nn::InstanceNorm2d(channels), torch::nn::ReLU(),
                                                         torch::nn::ReflectionPad2d(1), SNConv2d(SNConv2dOptions(channels, channels, 3)),
                                                         torch::nn::InstanceNorm2d(channels)));
  }
  torch::Tensor forward(const torch::Tensor& x) { return x + body->forward(x); }
  torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(GenResBlock);

/// Discriminator residual block: zero-padded convs with LeakyReLU, no normalization.
class DiscResBlockImpl : public torch::nn::Module {
 public:
  explicit DiscResBlockImpl(int64_t channels) {
    body = register_module(
        "body", torch::nn::Sequential(SNConv2d(SNConv2dOptions(channels, channels, 3).padding(1)),
                                      torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)),
                                      SNConv2d(SNConv2dOptions(channels, channels, 3).padding(1))));
  }
  torch::Tensor forward(const torch::Tensor& x) { return F::leaky_relu(x + body->forward(x), F::LeakyReLUFuncOptions().negative_slope(0.2)); }
  torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(DiscResBlock);

torch::nn::LeakyReLU leaky() { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)); }

void require_image_batch(const torch::Tensor& x, int64_t channels, int64_t multiple, const char* who) {
  if (x.dim() != 4 || x.size(1) != channels) {
    throw Error(ErrorKind::ShapeMismatch, std::string(who) + " expects N x " + std::to_string(channels) + " x H x W input");
  }
  if (x.size(2) % multiple != 0 || x.size(3) % multiple != 0) {
    throw Error(ErrorKind::ShapeMismatch, std::string(who) + " needs H and W divisible by " + std::to_string(multiple));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Generator

void GeneratorSpec::validate() const {
  if (input_channels != 3 + kNumClasses) throw Error(ErrorKind::Configuration, "generator input must be 3 image + 3 mask channels");
  if (base_filters < 1 || max_filters < 1) throw Error(ErrorKind::Configuration, "generator filters must be positive");
  if (num_downsampling < 0 || num_resnet_blocks < 0) throw Error(ErrorKind::Configuration, "generator depth must be >= 0");
  if (stem_kernel < 1 || stem_kernel % 2 == 0) throw Error(ErrorKind::Configuration, "generator stem kernel must be odd");
}

GeneratorImpl::GeneratorImpl(GeneratorSpec spec) : spec_(spec) {
  spec_.validate();
  const int pad = spec_.stem_kernel / 2;
  const int f0 = filters_at(spec_.base_filters, spec_.max_filters, 0);

  encoder = torch::nn::Sequential();
  if (pad > 0) encoder->push_back(torch::nn::ReflectionPad2d(pad));
  encoder->push_back(SNConv2d(SNConv2dOptions(spec_.input_channels, f0, spec_.stem_kernel)));
  encoder->push_back(torch::nn::InstanceNorm2d(f0));
  encoder->push_back(torch::nn::ReLU());
  for (int i = 0; i < spec_.num_downsampling; ++i) {
    const int in = filters_at(spec_.base_filters, spec_.max_filters, i);
    const int out = filters_at(spec_.base_filters, spec_.max_filters, i + 1);
    encoder->push_back(SNConv2d(SNConv2dOptions(in, out, 3).stride(2).padding(1)));
    encoder->push_back(torch::nn::InstanceNorm2d(out));
    encoder->push_back(torch::nn::ReLU());
  }
  const int bottleneck = filters_at(spec_.base_filters, spec_.max_filters, spec_.num_downsampling);
  for (int i = 0; i < spec_.num_resnet_blocks; ++i) encoder->push_back(GenResBlock(bottleneck));
  register_module("encoder", encoder);

  // The attention block sits right after the first upsampling step.
  decoder_head = torch::nn::Sequential();
  int attention_channels = bottleneck;
  if (spec_.num_downsampling > 0) {
    const int out = filters_at(spec_.base_filters, spec_.max_filters, spec_.num_downsampling - 1);
    decoder_head->push_back(SNConv2d(SNConv2dOptions(bottleneck, out, 3).stride(2).padding(1).output_padding(1).transposed(true)));
    decoder_head->push_back(torch::nn::InstanceNorm2d(out));
    decoder_head->push_back(torch::nn::ReLU());
    attention_channels = out;
    register_module("decoder_head", decoder_head);
  }
  if (spec_.use_self_attention) attention = register_module("attention", SelfAttention(attention_channels, spec_.attention_reduction));

  decoder_tail = torch::nn::Sequential();
  for (int i = spec_.num_downsampling - 1; i > 0; --i) {
    const int in = filters_at(spec_.base_filters, spec_.max_filters, i);
    const int out = filters_at(spec_.base_filters, spec_.max_filters, i - 1);
    decoder_tail->push_back(SNConv2d(SNConv2dOptions(in, out, 3).stride(2).padding(1).output_padding(1).transposed(true)));
    decoder_tail->push_back(torch::nn::InstanceNorm2d(out));
    decoder_tail->push_back(torch::nn::ReLU());
  }
  if (pad > 0) decoder_tail->push_back(torch::nn::ReflectionPad2d(pad));
  decoder_tail->push_back(SNConv2d(SNConv2dOptions(f0, 3, spec_.stem_kernel)));
  register_module("decoder_tail", decoder_tail);
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& image, const torch::Tensor& mask_one_hot) {
  require_image_batch(image, 3, int64_t{1} << spec_.num_downsampling, "generator");
  if (mask_one_hot.sizes() != image.sizes()) throw Error(ErrorKind::ShapeMismatch, "generator image and mask batches differ in shape");
  auto x = encoder->forward(torch::cat({image * 2.0 - 1.0, mask_one_hot.to(image.dtype())}, 1));
  if (spec_.num_downsampling > 0) x = decoder_head->forward(x);
  if (spec_.use_self_attention) x = attention->forward(x);
  x = decoder_tail->forward(x);
  return (torch::tanh(x) + 1.0) * 0.5;
}

// ---------------------------------------------------------------------------
// Discriminator

void DiscriminatorSpec::validate() const {
  if (input_channels != 3) throw Error(ErrorKind::Configuration, "discriminator sees RGB images only");
  if (base_filters < 1 || max_filters < 1) throw Error(ErrorKind::Configuration, "discriminator filters must be positive");
  if (kernel < 2 || kernel % 2 != 0) throw Error(ErrorKind::Configuration, "discriminator kernel must be even and >= 2");
  if (shared_conv_layers < 1) throw Error(ErrorKind::Configuration, "discriminator needs at least one shared conv layer");
  if (seg_deconv_layers != shared_conv_layers) {
    throw Error(ErrorKind::Configuration, "segmentation deconvolutions must undo the shared downsampling");
  }
  if (seg_resnet_blocks < 0) throw Error(ErrorKind::Configuration, "seg_resnet_blocks must be >= 0");
}

DiscriminatorImpl::DiscriminatorImpl(DiscriminatorSpec spec) : spec_(spec) {
  spec_.validate();
  const int pad = (spec_.kernel - 2) / 2;
  int in = spec_.input_channels;
  for (int i = 0; i < spec_.shared_conv_layers; ++i) {
    const int out = filters_at(spec_.base_filters, spec_.max_filters, i);
    shared_convs_.push_back(register_module("shared" + std::to_string(i), SNConv2d(SNConv2dOptions(in, out, spec_.kernel).stride(2).padding(pad))));
    in = out;
  }
  if (spec_.use_self_attention) {
    attention_ = register_module("attention", SelfAttention(filters_at(spec_.base_filters, spec_.max_filters, 0), spec_.attention_reduction));
  }
  const int features = in;

  if (spec_.source_head) {
    source_head_ = torch::nn::Sequential();
    if (spec_.source_hidden) {
      source_head_->push_back(SNConv2d(SNConv2dOptions(features, features, 3).padding(1)));
      source_head_->push_back(leaky());
    }
    source_head_->push_back(SNConv2d(SNConv2dOptions(features, 1, 3).padding(1)));
    register_module("source_head", source_head_);
  }

  seg_blocks_ = torch::nn::Sequential();
  for (int i = 0; i < spec_.seg_resnet_blocks; ++i) seg_blocks_->push_back(DiscResBlock(features));
  if (spec_.seg_resnet_blocks > 0) register_module("seg_blocks", seg_blocks_);

  seg_upsample_ = torch::nn::Sequential();
  int c = features;
  for (int j = 0; j < spec_.seg_deconv_layers; ++j) {
    const int level = spec_.shared_conv_layers - 2 - j;
    const bool last = j + 1 == spec_.seg_deconv_layers;
    const int out = last ? kNumClasses : filters_at(spec_.base_filters, spec_.max_filters, level);
    seg_upsample_->push_back(SNConv2d(SNConv2dOptions(c, out, spec_.kernel).stride(2).padding(pad).transposed(true)));
    if (!last) seg_upsample_->push_back(leaky());
    c = out;
  }
  register_module("seg_upsample", seg_upsample_);
}

torch::Tensor DiscriminatorImpl::trunk(const torch::Tensor& image) {
  require_image_batch(image, spec_.input_channels, spec_.downsampling(), "discriminator");
  auto x = image * 2.0 - 1.0;
  for (std::size_t i = 0; i < shared_convs_.size(); ++i) {
    x = F::leaky_relu(shared_convs_[i]->forward(x), F::LeakyReLUFuncOptions().negative_slope(0.2));
    if (i == 0 && spec_.use_self_attention) x = attention_->forward(x);
  }
  return x;
}

torch::Tensor DiscriminatorImpl::source_scores(const torch::Tensor& features) {
  if (!spec_.source_head) throw Error(ErrorKind::Configuration, "network has no source head");
  return torch::sigmoid(source_head_->forward(features));
}

torch::Tensor DiscriminatorImpl::segment(const torch::Tensor& features) {
  auto x = spec_.seg_resnet_blocks > 0 ? seg_blocks_->forward(features) : features;
  return torch::softmax(seg_upsample_->forward(x), 1);
}

DiscriminatorOutput DiscriminatorImpl::forward(const torch::Tensor& image) {
  const auto features = trunk(image);
  DiscriminatorOutput out;
  if (spec_.source_head) out.source = source_scores(features);
  out.posterior = segment(features);
  return out;
}

std::vector<torch::Tensor> DiscriminatorImpl::shared_conv_parameters() {
  std::vector<torch::Tensor> out;
  for (auto& conv : shared_convs_) {
    for (auto& p : conv->parameters()) out.push_back(p);
  }
  return out;
}

std::vector<torch::Tensor> DiscriminatorImpl::source_head_parameters() {
  return spec_.source_head ? source_head_->parameters() : std::vector<torch::Tensor>{};
}

std::vector<torch::Tensor> DiscriminatorImpl::seg_head_parameters() {
  auto out = seg_upsample_->parameters();
  if (spec_.seg_resnet_blocks > 0) {
    auto blocks = seg_blocks_->parameters();
    out.insert(out.begin(), blocks.begin(), blocks.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bundle

NetworkBundle NetworkBundle::create(const NetworkConfig& config, std::uint64_t seed) {
  torch::manual_seed(seed);
  NetworkBundle b;
  b.g_ab = Generator(config.generator);
  b.g_ba = Generator(config.generator);
  b.d_a = Discriminator(config.discriminator);
  b.d_b = Discriminator(config.discriminator);
  return b;
}

std::vector<std::pair<std::string, torch::nn::Module*>> NetworkBundle::modules() {
  return {{"g_ab", g_ab.get()}, {"g_ba", g_ba.get()}, {"d_a", d_a.get()}, {"d_b", d_b.get()}};
}

std::map<std::string, torch::Tensor> NetworkBundle::parameter_registry() {
  std::map<std::string, torch::Tensor> out;
  for (auto& [name, module] : modules()) {
    for (const auto& item : module->named_parameters()) out.emplace(name + "." + item.key(), item.value());
  }
  return out;
}

std::int64_t parameter_count(torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

std::int64_t NetworkBundle::parameter_count() {
  std::int64_t n = 0;
  for (auto& [name, module] : modules()) n += nn::parameter_count(*module);
  return n;
}

void NetworkBundle::to(torch::Dtype dtype) {
  for (auto& [name, module] : modules()) module->to(dtype);
}

void NetworkBundle::train(bool on) {
  for (auto& [name, module] : modules()) module->train(on);
}

void save_module(torch::nn::Module& module, const std::filesystem::path& path) {
  torch::serialize::OutputArchive archive;
  module.save(archive);
  archive.save_to(path.string());
}

void load_module(torch::nn::Module& module, const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorKind::Io, "missing parameter archive " + path.string());
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  module.load(archive);
}

// ---------------------------------------------------------------------------
// Tensor bridges

torch::Tensor images_to_tensor(std::span<const ImagePatch> images) {
  if (images.empty()) throw Error(ErrorKind::InvalidInput, "empty image batch");
  const int h = images[0].height(), w = images[0].width();
  auto out = torch::empty({static_cast<int64_t>(images.size()), h, w, 3}, torch::kFloat32);
  float* dst = out.data_ptr<float>();
  for (const auto& img : images) {
    if (img.height() != h || img.width() != w) throw Error(ErrorKind::ShapeMismatch, "image batch with mixed shapes");
    std::copy(img.pixels().begin(), img.pixels().end(), dst);
    dst += img.pixels().size();
  }
  return out.permute({0, 3, 1, 2}).contiguous();
}

torch::Tensor masks_to_tensor(std::span<const LabelMask> masks) {
  if (masks.empty()) throw Error(ErrorKind::InvalidInput, "empty mask batch");
  const int h = masks[0].height(), w = masks[0].width();
  auto out = torch::empty({static_cast<int64_t>(masks.size()), h, w}, torch::kInt64);
  int64_t* dst = out.data_ptr<int64_t>();
  for (const auto& m : masks) {
    if (m.height() != h || m.width() != w) throw Error(ErrorKind::ShapeMismatch, "mask batch with mixed shapes");
    for (auto v : m.labels()) *dst++ = v;
  }
  return out;
}

torch::Tensor one_hot_labels(const torch::Tensor& labels) {
  const auto valid = labels.ne(label::kIgnore);
  if (labels.masked_select(valid).ge(kNumClasses).any().item<bool>()) {
    throw Error(ErrorKind::InvalidLabel, "label outside {0,1,2,255}");
  }
  const auto idx = labels.masked_fill(valid.logical_not(), 0);
  const auto oh = F::one_hot(idx, kNumClasses).permute({0, 3, 1, 2}).to(torch::kFloat32);
  return oh * valid.unsqueeze(1).to(torch::kFloat32);
}

ImagePatch tensor_to_image(const torch::Tensor& chw, Domain domain, std::string id) {
  const auto hwc = chw.detach().to(torch::kFloat32).clamp(0.0, 1.0).permute({1, 2, 0}).contiguous();
  std::vector<float> px(hwc.data_ptr<float>(), hwc.data_ptr<float>() + hwc.numel());
  return ImagePatch(static_cast<int>(chw.size(1)), static_cast<int>(chw.size(2)), std::move(px), domain, std::move(id));
}

ClassPosterior tensor_to_posterior(const torch::Tensor& chw) {
  const auto hwc = chw.detach().to(torch::kFloat32).permute({1, 2, 0}).contiguous();
  std::vector<float> probs(hwc.data_ptr<float>(), hwc.data_ptr<float>() + hwc.numel());
  return ClassPosterior(static_cast<int>(chw.size(1)), static_cast<int>(chw.size(2)), std::move(probs));
}

ImagePatch generator_forward(Generator& generator, const ImagePatch& image, const LabelMask& mask) {
  require_same_shape(image, mask);
  torch::NoGradGuard no_grad;
  const auto x = images_to_tensor(std::span(&image, 1));
  const auto m = one_hot_labels(masks_to_tensor(std::span(&mask, 1)));
  const auto y = generator->forward(x, m);
  return tensor_to_image(y[0], flip(image.domain()), image.id() + "-translated");
}

DiscriminatorResult discriminator_forward(Discriminator& discriminator, const ImagePatch& image) {
  torch::NoGradGuard no_grad;
  const auto out = discriminator->forward(images_to_tensor(std::span(&image, 1)));
  DiscriminatorResult r;
  if (out.source.defined()) r.source_scores = out.source[0][0].clone();
  r.posterior = tensor_to_posterior(out.posterior[0]);
  return r;
}

}  // namespace dasgan::nn
