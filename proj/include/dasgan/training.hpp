#pragma once

// Alternating adversarial optimization of the joint translation +
// segmentation model, the three comparison regimes (supervised on real A,
// supervised on translated B, two-step), checkpointing and F1-based model
// selection on the test split.

#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dasgan/datamodel.hpp"
#include "dasgan/losses.hpp"
#include "dasgan/metrics.hpp"
#include "dasgan/networks.hpp"

namespace dasgan::train {

enum class Mode { Dasgan, SegOnlyReal, SegOnlySynth, TwoStep };

std::string_view to_string(Mode mode);
/// Accepts "dasgan", "seg-real", "seg-synth", "two-step" (and underscore forms).
Mode mode_from_string(std::string_view text);

struct TrainConfig {
  Mode mode = Mode::Dasgan;
  int iterations = 5000;
  int batch_size = 4;
  double g_lr = 1e-4;
  double d_lr = 5e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  loss::LossWeights weights;
  std::uint64_t seed = 0;
  int pool_size = 50;
  int checkpoint_every = 500;
  /// Also push D_B's segmentation of translated B images into the generator objective.
  bool symmetric_seg = true;
  /// CycleGAN phase length for seg-synth / two-step; 0 means `iterations`.
  int phase_one_iterations = 0;
  int threads = 1;
  nn::NetworkConfig networks;
  /// Empty: checkpoints live in memory only.
  std::filesystem::path out_dir;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
/// Missing keys keep their defaults; unknown keys throw Configuration.
TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Replay buffer of generated images for the discriminator update.
class ImagePool {
 public:
  explicit ImagePool(int capacity = 50, double swap_probability = 0.5);

  /// Per image: while filling, store and return it; once full, with
  /// probability swap_probability return a random stored image and replace it
  /// with the fresh one, otherwise return the fresh image.
  torch::Tensor sample(const torch::Tensor& fresh, std::mt19937_64& rng);

  int size() const { return static_cast<int>(images_.size()); }
  int capacity() const { return capacity_; }
  /// Number of stored images returned so far.
  std::int64_t stored_returns() const { return stored_returns_; }

 private:
  int capacity_;
  double swap_probability_;
  std::vector<torch::Tensor> images_;
  std::int64_t stored_returns_ = 0;
};

/// Labels are N x H x W int64 (255 = ignore); for domain B they are the
/// conditioned masks of the CK labels.
struct Batch {
  torch::Tensor images;
  torch::Tensor labels;
};

/// Generator-side objective, kept as tensors for backpropagation.
struct GeneratorObjective {
  torch::Tensor gan_ab, gan_ba, cycle, seg, total;
};

struct DiscriminatorObjective {
  torch::Tensor adv_a, adv_b, seg, total;
};

/// fake_a = G_BA(x_b | c_b), fake_b = G_AB(x_a | y_a).
struct Translations {
  torch::Tensor fake_a, fake_b;
};

Translations translate(nn::NetworkBundle& bundle, const Batch& a, const Batch& b);

/// Adversarial terms on (real, pooled fake) plus segmentation of real and
/// freshly translated images in each domain, weighted by lambda_seg.
DiscriminatorObjective discriminator_objective(nn::NetworkBundle& bundle, const Batch& a, const Batch& b, const torch::Tensor& fake_a,
                                               const torch::Tensor& fake_b, const torch::Tensor& pooled_a, const torch::Tensor& pooled_b,
                                               const loss::LossWeights& weights);

GeneratorObjective generator_objective(nn::NetworkBundle& bundle, const Batch& a, const Batch& b, const Translations& fakes,
                                       const loss::LossWeights& weights, bool symmetric_seg);

struct CheckpointRecord {
  int iteration = 0;
  double test_f1 = 0.0;
  std::filesystem::path path;  // empty for in-memory checkpoints
};

struct LogRecord {
  int iteration = 0;
  loss::LossReport report;
  double d_loss = 0.0;
  double wall_seconds = 0.0;
};

struct TrainState {
  explicit TrainState(const TrainConfig& config);
  TrainState(TrainState&&) = default;
  TrainState& operator=(TrainState&&) = default;

  nn::NetworkBundle bundle;
  /// Segmentation-only network (D_A architecture without the source head).
  nn::Discriminator segmenter{nullptr};
  std::unique_ptr<torch::optim::Adam> g_optimizer, d_optimizer, seg_optimizer;
  ImagePool pool_a, pool_b;
  std::mt19937_64 rng;
  int iteration = 0;
  double best_f1 = -std::numeric_limits<double>::infinity();
  std::filesystem::path best_checkpoint;
  std::vector<CheckpointRecord> checkpoints;
  std::vector<LogRecord> log;
  std::optional<std::filesystem::path> synthetic_dir;

  /// The network used for prediction: D_A in adversarial modes, otherwise the segmenter.
  nn::Discriminator& predictor();
  /// Loads the best checkpoint's predictor weights.
  void restore_best();

  /// Serialized predictor parameters of the best checkpoint.
  std::string best_snapshot;
};

/// One discriminator update followed by one generator update.
/// Throws TrainingDivergence (with the component values) on a non-finite loss.
loss::LossReport train_step(TrainState& state, const TrainConfig& config, const Batch& a, const Batch& b);

/// Runs the loop for config.mode, checkpointing every config.checkpoint_every
/// iterations and at the end; tracks the best test mean F1.
TrainState train(const TrainConfig& config, const DatasetSplit& data);

/// Highest test F1; ties go to the later iteration. Empty input throws InvalidArgument.
CheckpointRecord select_model(std::span<const CheckpointRecord> checkpoints);

/// Translated B patches with both conditioned masks (2 per B sample).
std::vector<Sample> materialize_synthetic(nn::Generator& g_ba, std::span<const Sample> train_b);

/// Loads the predictor saved in a checkpoint directory.
nn::Discriminator load_predictor(const std::filesystem::path& checkpoint_dir);

}  // namespace dasgan::train
