#include "fuselite/losses.hpp"

#include <cmath>

#include "fuselite/ops.hpp"

namespace fuselite {

using ag::Var;

void LossWeights::validate() const {
  for (double l : lambda) {
    require(std::isfinite(l) && l >= 0.0, ErrorCode::InvalidArgument, "perceptual weights must be >= 0");
  }
  require(std::isfinite(w1) && w1 >= 0.0 && std::isfinite(w2) && w2 >= 0.0, ErrorCode::InvalidArgument,
          "generator weights must be >= 0");
}

template <typename T>
Var<T> perceptual_loss_taps(const NetworkParams<T>& phi, const Var<T>& fused, const std::vector<Var<T>>& reference_taps,
                            const LossWeights& weights) {
  const auto taps = feature_taps(phi, fused);
  require(taps.size() == weights.lambda.size() && reference_taps.size() == taps.size(), ErrorCode::ShapeMismatch,
          "perceptual loss expects " + std::to_string(weights.lambda.size()) + " taps");
  Var<T> total;
  for (std::size_t l = 0; l < taps.size(); ++l) {
    if (weights.lambda[l] == 0.0) {
      continue;
    }
    require(taps[l].shape() == reference_taps[l].shape(), ErrorCode::ShapeMismatch,
            "tap " + std::to_string(l) + " shapes differ: " + taps[l].shape().str() + " vs " +
                reference_taps[l].shape().str());
    const Var<T> term = ops::scale(ops::l1_mean(taps[l], reference_taps[l]), weights.lambda[l]);
    total = total.defined() ? ops::add(total, term) : term;
  }
  if (!total.defined()) {
    total = ops::scale(ops::l1_mean(fused, fused), 0.0);
  }
  return total;
}

template <typename T>
Var<T> perceptual_loss(const NetworkParams<T>& phi, const Var<T>& fused, const Var<T>& reference,
                       const LossWeights& weights) {
  require(fused.shape() == reference.shape(), ErrorCode::ShapeMismatch,
          "fused " + fused.shape().str() + " vs reference " + reference.shape().str());
  std::vector<Var<T>> ref_taps;
  if (reference.requires_grad()) {
    ref_taps = feature_taps(phi, reference);
  } else {
    ag::NoGradGuard guard;
    ref_taps = feature_taps(phi, reference);
  }
  return perceptual_loss_taps(phi, fused, ref_taps, weights);
}

template <typename T>
Var<T> discriminator_loss(const Var<T>& score_real, const Var<T>& score_fake) {
  require(score_real.shape() == score_fake.shape(), ErrorCode::ShapeMismatch,
          "score maps differ: " + score_real.shape().str() + " vs " + score_fake.shape().str());
  return ops::scale(ops::add(ops::mse_to_constant(score_fake, 0.0), ops::mse_to_constant(score_real, 1.0)), 0.5);
}

template <typename T>
Var<T> adversarial_loss(const Var<T>& score_fake) {
  return ops::mse_to_constant(score_fake, 1.0);
}

template <typename T>
Var<T> generator_loss(const Var<T>& feat, const Var<T>& adv, const LossWeights& weights) {
  return ops::add(ops::scale(feat, weights.w1), ops::scale(adv, weights.w2));
}

template <typename T>
Var<T> homography_loss(const Var<T>& predicted, const Var<T>& truth) {
  require(predicted.shape() == truth.shape(), ErrorCode::ShapeMismatch,
          "offset tensors differ: " + predicted.shape().str() + " vs " + truth.shape().str());
  return ops::mean(ops::square(ops::sub(predicted, truth)));
}

double perceptual_loss(const ImageBuffer& fused, const ImageBuffer& reference, const NetworkParams<double>& phi,
                       const LossWeights& weights) {
  require(fused.size() == reference.size(), ErrorCode::ShapeMismatch, "fused and reference sizes differ");
  ag::NoGradGuard guard;
  const auto a = Var<double>::constant(to_tensor<double>(fused));
  const auto b = Var<double>::constant(to_tensor<double>(reference));
  return perceptual_loss(phi, a, b, weights).value()[0];
}

double discriminator_loss(const Tensor<double>& score_real, const Tensor<double>& score_fake) {
  ag::NoGradGuard guard;
  return discriminator_loss(Var<double>::constant(score_real), Var<double>::constant(score_fake)).value()[0];
}

double adversarial_loss(const Tensor<double>& score_fake) {
  ag::NoGradGuard guard;
  return adversarial_loss(Var<double>::constant(score_fake)).value()[0];
}

double generator_loss(double feat, double adv, const LossWeights& weights) {
  return weights.w1 * feat + weights.w2 * adv;
}

double homography_loss(const CornerOffsets& predicted, const CornerOffsets& truth) {
  require(predicted.patch_size == truth.patch_size, ErrorCode::PatchSizeMismatch,
          "offsets expressed for different patch sizes");
  const auto p = predicted.flat();
  const auto t = truth.flat();
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sum += (p[i] - t[i]) * (p[i] - t[i]);
  }
  return sum / static_cast<double>(p.size());
}

#define FUSELITE_INSTANTIATE_LOSSES(T)                                                                         \
  template Var<T> perceptual_loss(const NetworkParams<T>&, const Var<T>&, const Var<T>&, const LossWeights&);   \
  template Var<T> perceptual_loss_taps(const NetworkParams<T>&, const Var<T>&, const std::vector<Var<T>>&,      \
                                       const LossWeights&);                                                    \
  template Var<T> discriminator_loss(const Var<T>&, const Var<T>&);                                            \
  template Var<T> adversarial_loss(const Var<T>&);                                                             \
  template Var<T> generator_loss(const Var<T>&, const Var<T>&, const LossWeights&);                            \
  template Var<T> homography_loss(const Var<T>&, const Var<T>&);

FUSELITE_INSTANTIATE_LOSSES(float)
FUSELITE_INSTANTIATE_LOSSES(double)

#undef FUSELITE_INSTANTIATE_LOSSES

}  // namespace fuselite
