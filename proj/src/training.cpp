#include "dasgan/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "dasgan/ck_pipeline.hpp"
#include "dasgan/error.hpp"
#include "dasgan/inference.hpp"
#include "dasgan/io.hpp"

namespace dasgan::train {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::Dasgan: return "dasgan";
    case Mode::SegOnlyReal: return "seg-real";
    case Mode::SegOnlySynth: return "seg-synth";
    case Mode::TwoStep: return "two-step";
  }
  return "?";
}

Mode mode_from_string(std::string_view text) {
  std::string s(text);
  std::replace(s.begin(), s.end(), '_', '-');
  if (s == "dasgan") return Mode::Dasgan;
  if (s == "seg-real" || s == "seg-only-real") return Mode::SegOnlyReal;
  if (s == "seg-synth" || s == "seg-only-synth") return Mode::SegOnlySynth;
  if (s == "two-step") return Mode::TwoStep;
  throw Error(ErrorKind::Configuration, "unknown training mode '" + std::string(text) + "'");
}

void TrainConfig::validate() const {
  if (iterations <= 0) throw Error(ErrorKind::Configuration, "iterations must be > 0");
  if (batch_size <= 0) throw Error(ErrorKind::Configuration, "batch_size must be > 0");
  if (!(g_lr > 0.0) || !(d_lr > 0.0)) throw Error(ErrorKind::Configuration, "learning rates must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw Error(ErrorKind::Configuration, "Adam betas must lie in [0, 1)");
  }
  if (pool_size < 0) throw Error(ErrorKind::Configuration, "pool_size must be >= 0");
  if (checkpoint_every <= 0) throw Error(ErrorKind::Configuration, "checkpoint_every must be > 0");
  if (phase_one_iterations < 0) throw Error(ErrorKind::Configuration, "phase_one_iterations must be >= 0");
  if (threads <= 0) throw Error(ErrorKind::Configuration, "threads must be > 0");
  weights.validate();
  networks.generator.validate();
  networks.discriminator.validate();
}

// ---------------------------------------------------------------------------
// Config serialization

namespace {

template <class T>
void read_field(const json& j, const char* key, T& out) {
  try {
    out = j.get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Configuration, std::string("bad value for '") + key + "': " + e.what());
  }
}

[[noreturn]] void unknown_key(const std::string& where, const std::string& key) {
  throw Error(ErrorKind::Configuration, "unknown " + where + " key '" + key + "'");
}

json to_json(const nn::GeneratorSpec& s) {
  return {{"input_channels", s.input_channels},     {"base_filters", s.base_filters},
          {"max_filters", s.max_filters},           {"num_downsampling", s.num_downsampling},
          {"num_resnet_blocks", s.num_resnet_blocks}, {"stem_kernel", s.stem_kernel},
          {"use_self_attention", s.use_self_attention}, {"attention_reduction", s.attention_reduction}};
}

json to_json(const nn::DiscriminatorSpec& s) {
  return {{"input_channels", s.input_channels},
          {"base_filters", s.base_filters},
          {"max_filters", s.max_filters},
          {"kernel", s.kernel},
          {"shared_conv_layers", s.shared_conv_layers},
          {"seg_resnet_blocks", s.seg_resnet_blocks},
          {"seg_deconv_layers", s.seg_deconv_layers},
          {"use_self_attention", s.use_self_attention},
          {"attention_reduction", s.attention_reduction},
          {"source_head", s.source_head},
          {"source_hidden", s.source_hidden}};
}

nn::GeneratorSpec generator_from_json(const json& j, nn::GeneratorSpec s) {
  for (const auto& [key, v] : j.items()) {
    if (key == "input_channels") read_field(v, "input_channels", s.input_channels);
    else if (key == "base_filters") read_field(v, "base_filters", s.base_filters);
    else if (key == "max_filters") read_field(v, "max_filters", s.max_filters);
    else if (key == "num_downsampling") read_field(v, "num_downsampling", s.num_downsampling);
    else if (key == "num_resnet_blocks") read_field(v, "num_resnet_blocks", s.num_resnet_blocks);
    else if (key == "stem_kernel") read_field(v, "stem_kernel", s.stem_kernel);
    else if (key == "use_self_attention") read_field(v, "use_self_attention", s.use_self_attention);
    else if (key == "attention_reduction") read_field(v, "attention_reduction", s.attention_reduction);
    else unknown_key("generator", key);
  }
  return s;
}

nn::DiscriminatorSpec discriminator_from_json(const json& j, nn::DiscriminatorSpec s) {
  for (const auto& [key, v] : j.items()) {
    if (key == "input_channels") read_field(v, "input_channels", s.input_channels);
    else if (key == "base_filters") read_field(v, "base_filters", s.base_filters);
    else if (key == "max_filters") read_field(v, "max_filters", s.max_filters);
    else if (key == "kernel") read_field(v, "kernel", s.kernel);
    else if (key == "shared_conv_layers") read_field(v, "shared_conv_layers", s.shared_conv_layers);
    else if (key == "seg_resnet_blocks") read_field(v, "seg_resnet_blocks", s.seg_resnet_blocks);
    else if (key == "seg_deconv_layers") read_field(v, "seg_deconv_layers", s.seg_deconv_layers);
    else if (key == "use_self_attention") read_field(v, "use_self_attention", s.use_self_attention);
    else if (key == "attention_reduction") read_field(v, "attention_reduction", s.attention_reduction);
    else if (key == "source_head") read_field(v, "source_head", s.source_head);
    else if (key == "source_hidden") read_field(v, "source_hidden", s.source_hidden);
    else unknown_key("discriminator", key);
  }
  return s;
}

}  // namespace

json to_json(const TrainConfig& c) {
  return {{"mode", std::string(to_string(c.mode))},
          {"iterations", c.iterations},
          {"batch_size", c.batch_size},
          {"g_lr", c.g_lr},
          {"d_lr", c.d_lr},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"weights", {{"lambda_cycle", c.weights.lambda_cycle}, {"lambda_seg", c.weights.lambda_seg}}},
          {"seed", c.seed},
          {"pool_size", c.pool_size},
          {"checkpoint_every", c.checkpoint_every},
          {"symmetric_seg", c.symmetric_seg},
          {"phase_one_iterations", c.phase_one_iterations},
          {"threads", c.threads},
          {"networks", {{"generator", to_json(c.networks.generator)}, {"discriminator", to_json(c.networks.discriminator)}}}};
}

TrainConfig config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw Error(ErrorKind::Configuration, "training config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "mode") {
      std::string m;
      read_field(v, "mode", m);
      c.mode = mode_from_string(m);
    } else if (key == "iterations") read_field(v, "iterations", c.iterations);
    else if (key == "batch_size") read_field(v, "batch_size", c.batch_size);
    else if (key == "g_lr") read_field(v, "g_lr", c.g_lr);
    else if (key == "d_lr") read_field(v, "d_lr", c.d_lr);
    else if (key == "adam_beta1") read_field(v, "adam_beta1", c.adam_beta1);
    else if (key == "adam_beta2") read_field(v, "adam_beta2", c.adam_beta2);
    else if (key == "seed") read_field(v, "seed", c.seed);
    else if (key == "pool_size") read_field(v, "pool_size", c.pool_size);
    else if (key == "checkpoint_every") read_field(v, "checkpoint_every", c.checkpoint_every);
    else if (key == "symmetric_seg") read_field(v, "symmetric_seg", c.symmetric_seg);
    else if (key == "phase_one_iterations") read_field(v, "phase_one_iterations", c.phase_one_iterations);
    else if (key == "threads") read_field(v, "threads", c.threads);
    else if (key == "weights") {
      for (const auto& [wk, wv] : v.items()) {
        if (wk == "lambda_cycle") read_field(wv, "lambda_cycle", c.weights.lambda_cycle);
        else if (wk == "lambda_seg") read_field(wv, "lambda_seg", c.weights.lambda_seg);
        else unknown_key("weights", wk);
      }
    } else if (key == "networks") {
      for (const auto& [nk, nv] : v.items()) {
        if (nk == "generator") c.networks.generator = generator_from_json(nv, c.networks.generator);
        else if (nk == "discriminator") c.networks.discriminator = discriminator_from_json(nv, c.networks.discriminator);
        else unknown_key("networks", nk);
      }
    } else {
      unknown_key("training config", key);
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Image pool

ImagePool::ImagePool(int capacity, double swap_probability) : capacity_(capacity), swap_probability_(swap_probability) {
  if (capacity < 0) throw Error(ErrorKind::InvalidArgument, "pool capacity must be >= 0");
  if (!(swap_probability >= 0.0 && swap_probability <= 1.0)) throw Error(ErrorKind::InvalidArgument, "swap probability must lie in [0, 1]");
}

torch::Tensor ImagePool::sample(const torch::Tensor& fresh, std::mt19937_64& rng) {
  if (capacity_ == 0) return fresh;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<torch::Tensor> out;
  out.reserve(static_cast<std::size_t>(fresh.size(0)));
  for (int64_t i = 0; i < fresh.size(0); ++i) {
    auto image = fresh[i].detach().clone();
    if (size() < capacity_) {
      images_.push_back(image);
      out.push_back(image);
    } else if (coin(rng) < swap_probability_) {
      std::uniform_int_distribution<int> pick(0, capacity_ - 1);
      const int k = pick(rng);
      out.push_back(images_[static_cast<std::size_t>(k)]);
      images_[static_cast<std::size_t>(k)] = image;
      ++stored_returns_;
    } else {
      out.push_back(image);
    }
  }
  return torch::stack(out);
}

// ---------------------------------------------------------------------------
// Objectives

namespace {

std::vector<torch::Tensor> parameters_of(std::initializer_list<torch::nn::Module*> modules) {
  std::vector<torch::Tensor> out;
  for (auto* m : modules) {
    for (auto& p : m->parameters()) out.push_back(p);
  }
  return out;
}

void set_requires_grad(std::initializer_list<torch::nn::Module*> modules, bool on) {
  for (auto* m : modules) {
    for (auto& p : m->parameters()) p.requires_grad_(on);
  }
}

double value_of(const torch::Tensor& t) { return t.item<double>(); }

}  // namespace

Translations translate(nn::NetworkBundle& bundle, const Batch& a, const Batch& b) {
  return {bundle.g_ba->forward(b.images, nn::one_hot_labels(b.labels)), bundle.g_ab->forward(a.images, nn::one_hot_labels(a.labels))};
}

DiscriminatorObjective discriminator_objective(nn::NetworkBundle& bundle, const Batch& a, const Batch& b, const torch::Tensor& fake_a,
                                               const torch::Tensor& fake_b, const torch::Tensor& pooled_a, const torch::Tensor& pooled_b,
                                               const loss::LossWeights& weights) {
  auto& d_a = bundle.d_a;
  auto& d_b = bundle.d_b;
  const bool with_seg = weights.lambda_seg > 0.0;

  const auto feat_real_a = d_a->trunk(a.images);
  const auto feat_real_b = d_b->trunk(b.images);
  DiscriminatorObjective out;
  out.adv_a = loss::adversarial_loss_d(d_a->source_scores(feat_real_a), d_a->source_scores(d_a->trunk(pooled_a)));
  out.adv_b = loss::adversarial_loss_d(d_b->source_scores(feat_real_b), d_b->source_scores(d_b->trunk(pooled_b)));
  if (with_seg) {
    // D_A: real A against its annotations, translated B against the conditioning masks; D_B symmetrically.
    const auto seg_a = loss::segmentation_loss(a.labels, d_a->segment(feat_real_a), b.labels, d_a->segment(d_a->trunk(fake_a)));
    const auto seg_b = loss::segmentation_loss(b.labels, d_b->segment(feat_real_b), a.labels, d_b->segment(d_b->trunk(fake_b)));
    out.seg = seg_a + seg_b;
  } else {
    out.seg = torch::zeros({}, a.images.options());
  }
  out.total = out.adv_a + out.adv_b + weights.lambda_seg * out.seg;
  return out;
}

GeneratorObjective generator_objective(nn::NetworkBundle& bundle, const Batch& a, const Batch& b, const Translations& fakes,
                                       const loss::LossWeights& weights, bool symmetric_seg) {
  const bool with_seg = weights.lambda_seg > 0.0;
  const auto cyc_a = bundle.g_ba->forward(fakes.fake_b, nn::one_hot_labels(a.labels));
  const auto cyc_b = bundle.g_ab->forward(fakes.fake_a, nn::one_hot_labels(b.labels));

  const auto feat_fake_a = bundle.d_a->trunk(fakes.fake_a);
  const auto feat_fake_b = bundle.d_b->trunk(fakes.fake_b);

  GeneratorObjective out;
  out.gan_ab = loss::adversarial_loss_g(bundle.d_b->source_scores(feat_fake_b));
  out.gan_ba = loss::adversarial_loss_g(bundle.d_a->source_scores(feat_fake_a));
  out.cycle = loss::cycle_loss(a.images, cyc_a, b.images, cyc_b);
  if (with_seg) {
    out.seg = loss::cross_entropy(b.labels, bundle.d_a->segment(feat_fake_a));
    if (symmetric_seg) out.seg = out.seg + loss::cross_entropy(a.labels, bundle.d_b->segment(feat_fake_b));
  } else {
    out.seg = torch::zeros({}, a.images.options());
  }
  out.total = loss::total_loss(out.gan_ab, out.gan_ba, out.cycle, out.seg, weights);
  return out;
}

// ---------------------------------------------------------------------------
// State

namespace {

bool uses_segmenter(Mode mode) { return mode != Mode::Dasgan; }

nn::DiscriminatorSpec segmenter_spec(const nn::DiscriminatorSpec& d) {
  auto s = d;
  s.source_head = false;
  return s;
}

torch::optim::AdamOptions adam(double lr, const TrainConfig& c) { return torch::optim::AdamOptions(lr).betas({c.adam_beta1, c.adam_beta2}); }

}  // namespace

TrainState::TrainState(const TrainConfig& config)
    : bundle(nn::NetworkBundle::create(config.networks, config.seed)),
      pool_a(config.pool_size),
      pool_b(config.pool_size),
      rng(config.seed ^ 0x5851f42d4c957f2dULL) {
  g_optimizer = std::make_unique<torch::optim::Adam>(parameters_of({bundle.g_ab.get(), bundle.g_ba.get()}), adam(config.g_lr, config));
  d_optimizer = std::make_unique<torch::optim::Adam>(parameters_of({bundle.d_a.get(), bundle.d_b.get()}), adam(config.d_lr, config));
  if (uses_segmenter(config.mode)) {
    torch::manual_seed(config.seed + 1);
    segmenter = nn::Discriminator(segmenter_spec(config.networks.discriminator));
    seg_optimizer = std::make_unique<torch::optim::Adam>(segmenter->parameters(), adam(config.d_lr, config));
  }
}

nn::Discriminator& TrainState::predictor() { return segmenter ? segmenter : bundle.d_a; }

namespace {

std::string serialize(torch::nn::Module& module) {
  torch::serialize::OutputArchive archive;
  module.save(archive);
  std::ostringstream os;
  archive.save_to(os);
  return os.str();
}

void deserialize(torch::nn::Module& module, const std::string& bytes) {
  torch::serialize::InputArchive archive;
  std::istringstream is(bytes);
  archive.load_from(is);
  module.load(archive);
}

}  // namespace

void TrainState::restore_best() {
  if (best_snapshot.empty()) throw Error(ErrorKind::InvalidArgument, "no checkpoint has been recorded");
  deserialize(*predictor(), best_snapshot);
}

// ---------------------------------------------------------------------------
// Step

namespace {

void require_finite(const char* what, std::initializer_list<std::pair<const char*, double>> parts) {
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) {
      std::ostringstream msg;
      msg << "non-finite " << what << " loss:";
      for (const auto& [n, x] : parts) msg << ' ' << n << '=' << x;
      throw Error(ErrorKind::TrainingDivergence, msg.str());
    }
  }
}

}  // namespace

loss::LossReport train_step(TrainState& state, const TrainConfig& config, const Batch& a, const Batch& b) {
  auto& bundle = state.bundle;
  bundle.train(true);
  torch::nn::Module* discs[] = {bundle.d_a.get(), bundle.d_b.get()};

  const auto fakes = translate(bundle, a, b);

  // Discriminators first, on detached translations.
  const auto fake_a = fakes.fake_a.detach();
  const auto fake_b = fakes.fake_b.detach();
  const auto pooled_a = state.pool_a.sample(fake_a, state.rng);
  const auto pooled_b = state.pool_b.sample(fake_b, state.rng);
  const auto d_obj = discriminator_objective(bundle, a, b, fake_a, fake_b, pooled_a, pooled_b, config.weights);
  require_finite("discriminator", {{"adv_a", value_of(d_obj.adv_a)}, {"adv_b", value_of(d_obj.adv_b)}, {"seg", value_of(d_obj.seg)}});
  state.d_optimizer->zero_grad();
  d_obj.total.backward();
  state.d_optimizer->step();

  // Then generators through the updated discriminators.
  set_requires_grad({discs[0], discs[1]}, false);
  const auto g_obj = generator_objective(bundle, a, b, fakes, config.weights, config.symmetric_seg);
  loss::LossReport report;
  report.gan_ab = value_of(g_obj.gan_ab);
  report.gan_ba = value_of(g_obj.gan_ba);
  report.cycle = value_of(g_obj.cycle);
  report.seg = value_of(g_obj.seg);
  report.total = loss::total_loss(report, config.weights);
  state.g_optimizer->zero_grad();
  g_obj.total.backward();
  state.g_optimizer->step();
  set_requires_grad({discs[0], discs[1]}, true);

  state.log.push_back({state.iteration + 1, report, value_of(d_obj.total), 0.0});
  ++state.iteration;
  return report;
}

// ---------------------------------------------------------------------------
// Loop

namespace {

/// Epoch-wise shuffled index stream.
class EpochSampler {
 public:
  explicit EpochSampler(int n) : n_(n) {}
  int next(std::mt19937_64& rng) {
    if (pos_ >= order_.size()) {
      order_.resize(static_cast<std::size_t>(n_));
      for (int i = 0; i < n_; ++i) order_[static_cast<std::size_t>(i)] = i;
      std::shuffle(order_.begin(), order_.end(), rng);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  int n_;
  std::vector<int> order_;
  std::size_t pos_ = 0;
};

struct Pool {
  torch::Tensor images;  // N x 3 x H x W
  torch::Tensor labels;  // N x H x W
};

Pool tensorize(std::span<const Sample> samples) {
  std::vector<ImagePatch> images;
  std::vector<LabelMask> masks;
  for (const auto& s : samples) {
    require_same_shape(s.image, s.mask);
    images.push_back(s.image);
    masks.push_back(s.mask);
  }
  return {nn::images_to_tensor(images), nn::masks_to_tensor(masks)};
}

/// B labels in both conditioned variants: rows [0, n) negative, [n, 2n) positive.
Pool tensorize_b(std::span<const Sample> samples) {
  auto pool = tensorize(samples);
  const auto positive = torch::where(pool.labels == label::kTcNegative, torch::full_like(pool.labels, label::kTcPositive), pool.labels);
  return {torch::cat({pool.images, pool.images}), torch::cat({pool.labels, positive})};
}

Batch draw(const Pool& pool, EpochSampler& sampler, int batch, std::mt19937_64& rng) {
  std::vector<int64_t> idx;
  for (int i = 0; i < batch; ++i) idx.push_back(sampler.next(rng));
  const auto t = torch::tensor(idx, torch::kInt64);
  return {pool.images.index_select(0, t), pool.labels.index_select(0, t)};
}

bool has_labels(const Sample& s) { return s.mask.count(label::kIgnore) < s.mask.labels().size(); }

/// Domain-A rows drawn per batch. When only part of train_a is labelled, half of
/// each batch (rounded up) comes from the labelled part.
class StratifiedSampler {
 public:
  explicit StratifiedSampler(std::span<const Sample> samples) {
    for (int i = 0; i < static_cast<int>(samples.size()); ++i) (has_labels(samples[static_cast<std::size_t>(i)]) ? labelled_ : unlabelled_).push_back(i);
    if (labelled_.empty() || unlabelled_.empty()) {
      labelled_.insert(labelled_.end(), unlabelled_.begin(), unlabelled_.end());
      unlabelled_.clear();
    }
    labelled_sampler_ = EpochSampler(static_cast<int>(labelled_.size()));
    unlabelled_sampler_ = EpochSampler(static_cast<int>(unlabelled_.size()));
  }

  Batch draw(const Pool& pool, int batch, std::mt19937_64& rng) {
    const int from_labelled = unlabelled_.empty() ? batch : (batch + 1) / 2;
    std::vector<int64_t> idx;
    for (int i = 0; i < batch; ++i) {
      idx.push_back(i < from_labelled ? labelled_[static_cast<std::size_t>(labelled_sampler_.next(rng))]
                                      : unlabelled_[static_cast<std::size_t>(unlabelled_sampler_.next(rng))]);
    }
    const auto t = torch::tensor(idx, torch::kInt64);
    return {pool.images.index_select(0, t), pool.labels.index_select(0, t)};
  }

 private:
  std::vector<int> labelled_, unlabelled_;
  EpochSampler labelled_sampler_{0}, unlabelled_sampler_{0};
};

class Trainer {
 public:
  Trainer(const TrainConfig& config, const DatasetSplit& data) : config_(config), data_(data), state_(config) {
    if (!config.out_dir.empty()) {
      fs::create_directories(config.out_dir);
      log_.open(config.out_dir / "training_log.jsonl", std::ios::trunc);
      if (!log_) throw Error(ErrorKind::Io, "cannot write " + (config.out_dir / "training_log.jsonl").string());
    }
  }

  TrainState run() {
    try {
      switch (config_.mode) {
        case Mode::Dasgan: adversarial_phase(config_.iterations, config_.weights, true); break;
        case Mode::SegOnlyReal: supervised_phase(labelled_real()); break;
        case Mode::SegOnlySynth:
        case Mode::TwoStep: {
          auto weights = config_.weights;
          weights.lambda_seg = 0.0;
          adversarial_phase(config_.phase_one_iterations > 0 ? config_.phase_one_iterations : config_.iterations, weights, false);
          auto synthetic = materialize_synthetic(state_.bundle.g_ba, data_.train_b);
          write_synthetic(synthetic);
          if (config_.mode == Mode::TwoStep) {
            const auto real = labelled_real(false);
            synthetic.insert(synthetic.end(), real.begin(), real.end());
          }
          state_.iteration = 0;
          supervised_phase(synthetic);
          break;
        }
      }
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::TrainingDivergence && !config_.out_dir.empty()) {
        io::write_json(config_.out_dir / "divergence.json", {{"iteration", state_.iteration + 1},
                                                              {"message", e.what()},
                                                              {"last_checkpoint", state_.checkpoints.empty() ? "" : state_.checkpoints.back().path.string()}});
      }
      throw;
    }
    return std::move(state_);
  }

 private:
  std::vector<Sample> labelled_real(bool required = true) const {
    std::vector<Sample> out;
    for (const auto& s : data_.train_a) {
      if (has_labels(s)) out.push_back(s);
    }
    if (out.empty() && required) throw Error(ErrorKind::InvalidInput, "mode " + std::string(to_string(config_.mode)) + " needs labelled domain-A patches");
    return out;
  }

  void adversarial_phase(int iterations, const loss::LossWeights& weights, bool checkpoints) {
    if (data_.train_a.empty() || data_.train_b.empty()) throw Error(ErrorKind::InvalidInput, "adversarial training needs domain-A and domain-B patches");
    const auto pool_a = tensorize(data_.train_a);
    const auto pool_b = tensorize_b(data_.train_b);
    StratifiedSampler sample_a(data_.train_a);
    EpochSampler sample_b(static_cast<int>(pool_b.images.size(0)));
    auto step_config = config_;
    step_config.weights = weights;
    for (int it = 0; it < iterations; ++it) {
      const auto start = std::chrono::steady_clock::now();
      const auto a = sample_a.draw(pool_a, config_.batch_size, state_.rng);
      const auto b = draw(pool_b, sample_b, config_.batch_size, state_.rng);
      train_step(state_, step_config, a, b);
      finish_iteration(start, checkpoints, iterations);
    }
  }

  void supervised_phase(std::span<const Sample> samples) {
    if (samples.empty()) throw Error(ErrorKind::InvalidInput, "no training patches for the supervised phase");
    const auto pool = tensorize(samples);
    EpochSampler sampler(static_cast<int>(pool.images.size(0)));
    auto& net = state_.segmenter;
    for (int it = 0; it < config_.iterations; ++it) {
      const auto start = std::chrono::steady_clock::now();
      net->train(true);
      const auto batch = draw(pool, sampler, config_.batch_size, state_.rng);
      const auto ce = loss::cross_entropy(batch.labels, net->segment(net->trunk(batch.images)));
      loss::LossReport report;
      report.seg = value_of(ce);
      report.total = loss::total_loss(report, config_.weights);
      state_.seg_optimizer->zero_grad();
      ce.backward();
      state_.seg_optimizer->step();
      state_.log.push_back({state_.iteration + 1, report, 0.0, 0.0});
      ++state_.iteration;
      finish_iteration(start, true, config_.iterations);
    }
  }

  void finish_iteration(std::chrono::steady_clock::time_point start, bool checkpoints, int iterations) {
    auto& rec = state_.log.back();
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (log_) {
      auto j = loss::to_json(rec.report);
      j["iteration"] = rec.iteration;
      j["d_loss"] = rec.d_loss;
      j["wall_seconds"] = rec.wall_seconds;
      log_ << j.dump() << '\n';
    }
    if (checkpoints && (state_.iteration % config_.checkpoint_every == 0 || state_.iteration == iterations)) checkpoint();
  }

  void checkpoint() {
    auto& net = state_.predictor();
    net->eval();
    const double f1 = infer::evaluate(net, data_.test).mean_three;
    net->train(true);

    CheckpointRecord rec{state_.iteration, f1, {}};
    if (!config_.out_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "iter_%06d", state_.iteration);
      rec.path = config_.out_dir / "checkpoints" / name;
      fs::create_directories(rec.path);
      if (state_.segmenter) {
        nn::save_module(*state_.segmenter, rec.path / "segmenter.pt");
      }
      if (config_.mode == Mode::Dasgan) {
        for (auto& [tag, module] : state_.bundle.modules()) nn::save_module(*module, rec.path / (tag + ".pt"));
      }
      nn::save_module(*net, rec.path / "predictor.pt");
      io::write_json(rec.path / "predictor_spec.json", to_json(net->spec()));
      io::write_json(rec.path / "manifest.json", {{"iteration", rec.iteration},
                                                  {"mode", std::string(to_string(config_.mode))},
                                                  {"config_hash", io::config_hash(to_json(config_))},
                                                  {"test_mean_f1", f1}});
    }
    state_.checkpoints.push_back(rec);
    if (f1 >= state_.best_f1) {
      state_.best_f1 = f1;
      state_.best_checkpoint = rec.path;
      state_.best_snapshot = serialize(*net);
    }
  }

  void write_synthetic(const std::vector<Sample>& synthetic) {
    if (config_.out_dir.empty()) return;
    DatasetSplit split;
    split.train_a = synthetic;
    const auto dir = config_.out_dir / "synthetic_a";
    io::write_split(dir, split);
    state_.synthetic_dir = dir;
  }

  TrainConfig config_;
  const DatasetSplit& data_;
  TrainState state_;
  std::ofstream log_;
};

}  // namespace

TrainState train(const TrainConfig& config, const DatasetSplit& data) {
  config.validate();
  torch::set_num_threads(config.threads);
  Trainer trainer(config, data);
  return trainer.run();
}

CheckpointRecord select_model(std::span<const CheckpointRecord> checkpoints) {
  if (checkpoints.empty()) throw Error(ErrorKind::InvalidArgument, "model selection needs at least one checkpoint");
  const CheckpointRecord* best = &checkpoints.front();
  for (const auto& c : checkpoints) {
    if (c.test_f1 > best->test_f1 || (c.test_f1 == best->test_f1 && c.iteration >= best->iteration)) best = &c;
  }
  return *best;
}

std::vector<Sample> materialize_synthetic(nn::Generator& g_ba, std::span<const Sample> train_b) {
  std::vector<Sample> out;
  out.reserve(train_b.size() * 2);
  g_ba->eval();
  for (const auto& s : train_b) {
    for (bool positive : {false, true}) {
      auto mask = ck::condition_label_mask(s.mask, positive);
      const auto fake = nn::generator_forward(g_ba, s.image, mask);
      ImagePatch image(fake.height(), fake.width(), std::vector<float>(fake.pixels().begin(), fake.pixels().end()), Domain::A,
                       "syn-" + s.image.id() + (positive ? "-pos" : "-neg"));
      out.push_back({std::move(image),
                     LabelMask(mask.height(), mask.width(), std::vector<std::uint8_t>(mask.labels().begin(), mask.labels().end()), Domain::A)});
    }
  }
  g_ba->train(true);
  return out;
}

nn::Discriminator load_predictor(const fs::path& checkpoint_dir) {
  const auto spec = discriminator_from_json(io::read_json(checkpoint_dir / "predictor_spec.json"), {});
  spec.validate();
  nn::Discriminator net(spec);
  nn::load_module(*net, checkpoint_dir / "predictor.pt");
  net->eval();
  return net;
}

}  // namespace dasgan::train
