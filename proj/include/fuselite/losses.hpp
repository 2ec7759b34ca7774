#pragma once

// Training objectives. Every loss uses mean reduction over elements (and over
// the batch), so values are independent of image and batch size.

#include <array>

#include "fuselite/geometry.hpp"
#include "fuselite/nets.hpp"

namespace fuselite {

struct LossWeights {
  // Per-tap perceptual weights: input, conv1_2, conv2_2, conv3_2, conv4_2, conv5_2.
  std::array<double, 6> lambda{1.0, 1.0 / 2.6, 1.0 / 4.8, 1.0 / 3.7, 1.0 / 5.6, 1.0 / 0.15};
  double w1 = 1.0;
  double w2 = 0.01;

  void validate() const;
};

// Differentiable forms.

template <typename T>
ag::Var<T> perceptual_loss(const NetworkParams<T>& phi, const ag::Var<T>& fused, const ag::Var<T>& reference,
                           const LossWeights& weights);

// Same as above with the reference taps precomputed (they never need gradients).
template <typename T>
ag::Var<T> perceptual_loss_taps(const NetworkParams<T>& phi, const ag::Var<T>& fused,
                                const std::vector<ag::Var<T>>& reference_taps, const LossWeights& weights);

template <typename T>
ag::Var<T> discriminator_loss(const ag::Var<T>& score_real, const ag::Var<T>& score_fake);

template <typename T>
ag::Var<T> adversarial_loss(const ag::Var<T>& score_fake);

template <typename T>
ag::Var<T> generator_loss(const ag::Var<T>& feat, const ag::Var<T>& adv, const LossWeights& weights);

template <typename T>
ag::Var<T> homography_loss(const ag::Var<T>& predicted, const ag::Var<T>& truth);

// Plain-value forms.

double perceptual_loss(const ImageBuffer& fused, const ImageBuffer& reference, const NetworkParams<double>& phi,
                       const LossWeights& weights);
double discriminator_loss(const Tensor<double>& score_real, const Tensor<double>& score_fake);
double adversarial_loss(const Tensor<double>& score_fake);
double generator_loss(double feat, double adv, const LossWeights& weights);
double homography_loss(const CornerOffsets& predicted, const CornerOffsets& truth);

}  // namespace fuselite
