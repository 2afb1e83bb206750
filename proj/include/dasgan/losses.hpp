#pragma once

// Adversarial, cycle-consistency and segmentation losses plus their weighted
// combination. Each term is a mean over its pixels; domain terms are summed.

#include <torch/torch.h>

#include <nlohmann/json.hpp>

namespace dasgan::loss {

inline constexpr double kLogEps = 1e-7;

struct LossWeights {
  double lambda_cycle = 10.0;
  double lambda_seg = 1.0;

  void validate() const;
};

/// Generator-side components and their weighted total.
struct LossReport {
  double gan_ab = 0.0;
  double gan_ba = 0.0;
  double cycle = 0.0;
  double seg = 0.0;
  double total = 0.0;
};

nlohmann::json to_json(const LossReport& report);

/// -[mean log D(real) + mean log(1 - D(fake))]; scores clamped to [eps, 1-eps].
torch::Tensor adversarial_loss_d(const torch::Tensor& real_scores, const torch::Tensor& fake_scores);

/// Non-saturating generator objective -mean log D(fake).
torch::Tensor adversarial_loss_g(const torch::Tensor& fake_scores);

/// mean |x_a - cyc_a| + mean |x_b - cyc_b|.
torch::Tensor cycle_loss(const torch::Tensor& x_a, const torch::Tensor& cyc_a, const torch::Tensor& x_b, const torch::Tensor& cyc_b);

/// Categorical cross-entropy of one domain: labels N x H x W (255 ignored),
/// posterior N x 3 x H x W. Averaged over labelled pixels; 0 when there are none.
torch::Tensor cross_entropy(const torch::Tensor& labels, const torch::Tensor& posterior);

torch::Tensor segmentation_loss(const torch::Tensor& true_a, const torch::Tensor& pred_a, const torch::Tensor& true_b,
                                const torch::Tensor& pred_b);

/// gan_ab + gan_ba + lambda_cycle * cycle + lambda_seg * seg. Throws
/// TrainingDivergence when any part is not finite.
double total_loss(const LossReport& parts, const LossWeights& weights);

/// Same composition on tensors, for backpropagation.
torch::Tensor total_loss(const torch::Tensor& gan_ab, const torch::Tensor& gan_ba, const torch::Tensor& cycle,
                         const torch::Tensor& seg, const LossWeights& weights);

}  // namespace dasgan::loss
