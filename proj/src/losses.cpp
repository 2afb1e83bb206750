#include "dasgan/losses.hpp"

#include <cmath>
#include <sstream>

#include "dasgan/datamodel.hpp"
#include "dasgan/error.hpp"

namespace dasgan::loss {

void LossWeights::validate() const {
  if (!(lambda_cycle >= 0.0) || !(lambda_seg >= 0.0)) throw Error(ErrorKind::Configuration, "loss weights must be >= 0");
}

nlohmann::json to_json(const LossReport& r) {
  return {{"gan_ab", r.gan_ab}, {"gan_ba", r.gan_ba}, {"cycle", r.cycle}, {"seg", r.seg}, {"total", r.total}};
}

namespace {

torch::Tensor clamp_prob(const torch::Tensor& p) { return p.clamp(kLogEps, 1.0 - kLogEps); }

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    std::ostringstream msg;
    msg << what << ": shape " << a.sizes() << " vs " << b.sizes();
    throw Error(ErrorKind::ShapeMismatch, msg.str());
  }
}

}  // namespace

torch::Tensor adversarial_loss_d(const torch::Tensor& real_scores, const torch::Tensor& fake_scores) {
  return -(torch::log(clamp_prob(real_scores)).mean() + torch::log(1.0 - clamp_prob(fake_scores)).mean());
}

torch::Tensor adversarial_loss_g(const torch::Tensor& fake_scores) { return -torch::log(clamp_prob(fake_scores)).mean(); }

torch::Tensor cycle_loss(const torch::Tensor& x_a, const torch::Tensor& cyc_a, const torch::Tensor& x_b, const torch::Tensor& cyc_b) {
  require_same_shape(x_a, cyc_a, "cycle loss (domain A)");
  require_same_shape(x_b, cyc_b, "cycle loss (domain B)");
  return (x_a - cyc_a).abs().mean() + (x_b - cyc_b).abs().mean();
}

torch::Tensor cross_entropy(const torch::Tensor& labels, const torch::Tensor& posterior) {
  if (posterior.dim() != 4 || posterior.size(1) != kNumClasses || labels.dim() != 3 || labels.size(0) != posterior.size(0) ||
      labels.size(1) != posterior.size(2) || labels.size(2) != posterior.size(3)) {
    std::ostringstream msg;
    msg << "cross entropy: labels " << labels.sizes() << " vs posterior " << posterior.sizes();
    throw Error(ErrorKind::ShapeMismatch, msg.str());
  }
  const auto valid = labels.ne(label::kIgnore);
  const auto idx = labels.masked_fill(valid.logical_not(), 0).unsqueeze(1);
  const auto picked = posterior.gather(1, idx).squeeze(1);
  const auto weight = valid.to(posterior.dtype());
  const auto count = weight.sum();
  const auto nll = -(torch::log(clamp_prob(picked)) * weight).sum();
  return nll / count.clamp_min(1.0);
}

torch::Tensor segmentation_loss(const torch::Tensor& true_a, const torch::Tensor& pred_a, const torch::Tensor& true_b,
                                const torch::Tensor& pred_b) {
  return cross_entropy(true_a, pred_a) + cross_entropy(true_b, pred_b);
}

double total_loss(const LossReport& parts, const LossWeights& weights) {
  for (double v : {parts.gan_ab, parts.gan_ba, parts.cycle, parts.seg}) {
    if (!std::isfinite(v)) {
      std::ostringstream msg;
      msg << "non-finite loss component: gan_ab=" << parts.gan_ab << " gan_ba=" << parts.gan_ba << " cycle=" << parts.cycle
          << " seg=" << parts.seg;
      throw Error(ErrorKind::TrainingDivergence, msg.str());
    }
  }
  return parts.gan_ab + parts.gan_ba + weights.lambda_cycle * parts.cycle + weights.lambda_seg * parts.seg;
}

torch::Tensor total_loss(const torch::Tensor& gan_ab, const torch::Tensor& gan_ba, const torch::Tensor& cycle, const torch::Tensor& seg,
                         const LossWeights& weights) {
  return gan_ab + gan_ba + weights.lambda_cycle * cycle + weights.lambda_seg * seg;
}

}  // namespace dasgan::loss
