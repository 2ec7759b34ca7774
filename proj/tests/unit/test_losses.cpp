#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fuselite/error.hpp"
#include "fuselite/losses.hpp"
#include "fuselite/ops.hpp"
#include "fuselite/quality.hpp"
#include "support.hpp"

namespace fuselite {
namespace {

using ag::Var;
using testing::random_image;
using testing::random_tensor;
using TD = Tensor<double>;
using VD = Var<double>;

NetworkParams<double> small_phi(std::uint64_t seed = 3) {
  ArchSpec a;
  a.kind = NetworkKind::feature_extractor;
  a.width = 2;
  std::mt19937_64 rng(seed);
  return init_params<double>(a, rng);
}

LossWeights only_tap(int i) {
  LossWeights w;
  w.lambda.fill(0.0);
  w.lambda[static_cast<std::size_t>(i)] = 1.0;
  return w;
}

TEST(Perceptual, BlackVersusWhiteOnInputTap) {
  const auto phi = small_phi();
  const ImageBuffer black(16, 16, 0.0), white(16, 16, 1.0);
  EXPECT_EQ(perceptual_loss(black, white, phi, only_tap(0)), 1.0);
  EXPECT_EQ(perceptual_loss(white, white, phi, LossWeights{}), 0.0);
}

TEST(Perceptual, MatchesPerTapL1Sum) {
  const auto phi = small_phi();
  std::mt19937_64 rng(1);
  const ImageBuffer a = random_image(rng, 32, 32), b = random_image(rng, 32, 32);
  const LossWeights w;
  const auto ta = feature_extract(phi, a), tb = feature_extract(phi, b);
  double expected = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < ta[i].size(); ++k) {
      acc += std::abs(ta[i][k] - tb[i][k]);
    }
    expected += w.lambda[i] * acc / static_cast<double>(ta[i].size());
  }
  EXPECT_NEAR(perceptual_loss(a, b, phi, w), expected, 1e-6 * expected);
}

TEST(Perceptual, Symmetric) {
  const auto phi = small_phi();
  std::mt19937_64 rng(2);
  const ImageBuffer a = random_image(rng, 16, 16), b = random_image(rng, 16, 16);
  EXPECT_EQ(perceptual_loss(a, b, phi, LossWeights{}), perceptual_loss(b, a, phi, LossWeights{}));
}

TEST(Perceptual, BatchPermutationInvariant) {
  const auto phi = small_phi();
  std::mt19937_64 rng(4);
  const ImageBuffer a0 = random_image(rng, 16, 16), a1 = random_image(rng, 16, 16);
  const ImageBuffer b0 = random_image(rng, 16, 16), b1 = random_image(rng, 16, 16);
  const auto loss = [&](const ImageBuffer& x0, const ImageBuffer& x1, const ImageBuffer& y0, const ImageBuffer& y1) {
    return perceptual_loss(phi, VD::constant(stack_images<double>({&x0, &x1})),
                           VD::constant(stack_images<double>({&y0, &y1})), LossWeights{})
        .value()[0];
  };
  EXPECT_NEAR(loss(a0, a1, b0, b1), loss(a1, a0, b1, b0), 1e-12);
  // Mean reduction: the batch loss is the average of the per-sample losses.
  const double single = 0.5 * (perceptual_loss(a0, b0, phi, LossWeights{}) + perceptual_loss(a1, b1, phi, LossWeights{}));
  EXPECT_NEAR(loss(a0, a1, b0, b1), single, 1e-12);
}

TEST(Perceptual, GradientMatchesFiniteDifferences) {
  const auto phi = small_phi(5);
  std::mt19937_64 rng(6);
  VD fused = VD::leaf(random_tensor<double>(rng, {1, 3, 16, 16}, 0.1, 0.9));
  const VD reference = VD::constant(random_tensor<double>(rng, {1, 3, 16, 16}, 0.1, 0.9));
  const LossWeights w;
  perceptual_loss(phi, fused, reference, w).backward();
  const TD analytic = fused.grad();
  const TD numeric = testing::numeric_gradient(fused, [&] {
    return perceptual_loss(phi, fused, reference, w).value()[0];
  }, 1e-7);
  EXPECT_LT(testing::relative_error(analytic, numeric), 1e-3);
}

TEST(Lsgan, TrivialValues) {
  const TD ones(Shape{1, 1, 4, 4}, 1.0), zeros(Shape{1, 1, 4, 4}, 0.0), half(Shape{1, 1, 4, 4}, 0.5);
  EXPECT_EQ(discriminator_loss(ones, zeros), 0.0);
  EXPECT_EQ(discriminator_loss(zeros, ones), 1.0);
  EXPECT_EQ(discriminator_loss(half, half), 0.25);
  EXPECT_EQ(adversarial_loss(ones), 0.0);
  EXPECT_EQ(adversarial_loss(zeros), 1.0);
}

TEST(Lsgan, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  VD real = VD::leaf(random_tensor<double>(rng, {2, 1, 3, 3}));
  VD fake = VD::leaf(random_tensor<double>(rng, {2, 1, 3, 3}));
  discriminator_loss(real, fake).backward();
  const TD g_real = real.grad(), g_fake = fake.grad();
  auto d = [&] { return discriminator_loss(real, fake).value()[0]; };
  EXPECT_LT(testing::relative_error(g_real, testing::numeric_gradient(real, d)), 1e-8);
  EXPECT_LT(testing::relative_error(g_fake, testing::numeric_gradient(fake, d)), 1e-8);

  fake.zero_grad();
  adversarial_loss(fake).backward();
  const TD g_adv = fake.grad();
  auto a = [&] { return adversarial_loss(fake).value()[0]; };
  EXPECT_LT(testing::relative_error(g_adv, testing::numeric_gradient(fake, a)), 1e-8);
}

TEST(Generator, WeightedSum) {
  LossWeights w;
  EXPECT_DOUBLE_EQ(generator_loss(2.0, 3.0, w), 2.0 + 0.01 * 3.0);
  w.w1 = 0.5;
  w.w2 = 0.0;
  EXPECT_DOUBLE_EQ(generator_loss(2.0, 3.0, w), 1.0);
  const VD f = VD::constant(TD(Shape{1, 1, 1, 1}, 2.0)), a = VD::constant(TD(Shape{1, 1, 1, 1}, 3.0));
  EXPECT_DOUBLE_EQ(generator_loss(f, a, LossWeights{}).value()[0], 2.03);
}

TEST(Weights, Validation) {
  LossWeights w;
  EXPECT_NO_THROW(w.validate());
  w.w2 = -1.0;
  EXPECT_THROW(w.validate(), Error);
  w = LossWeights{};
  w.lambda[3] = std::nan("");
  EXPECT_THROW(w.validate(), Error);
}

TEST(HomographyLoss, MeanSquaredCornerDifference) {
  CornerOffsets a, b;
  b.du = {1, 1, 1, 1};
  b.dv = {1, 1, 1, 1};
  EXPECT_DOUBLE_EQ(homography_loss(a, b), 1.0);
  b.dv = {3, 3, 3, 3};
  EXPECT_DOUBLE_EQ(homography_loss(a, b), (4 * 1.0 + 4 * 9.0) / 8.0);
  EXPECT_EQ(homography_loss(b, b), 0.0);
  b.patch_size = {64, 64};
  try {
    homography_loss(a, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::PatchSizeMismatch);
  }
}

TEST(HomographyLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  VD pred = VD::leaf(random_tensor<double>(rng, {4, 8, 1, 1}, -5, 5));
  const VD truth = VD::constant(random_tensor<double>(rng, {4, 8, 1, 1}, -5, 5));
  homography_loss(pred, truth).backward();
  const TD analytic = pred.grad();
  const TD numeric = testing::numeric_gradient(pred, [&] { return homography_loss(pred, truth).value()[0]; });
  EXPECT_LT(testing::relative_error(analytic, numeric), 1e-8);
}

TEST(Quality, PsnrKnownValues) {
  const ImageBuffer a(8, 8, 0.0), b(8, 8, 0.1);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
  EXPECT_EQ(psnr(a, a), kPsnrCap);
  Bitmap mask(8, 8, 0);
  mask.at(0, 0) = 1;
  ImageBuffer c = a;
  c.at(5, 5, 0) = 1.0;  // outside the mask
  EXPECT_EQ(masked_psnr(a, c, mask), kPsnrCap);
}

TEST(Quality, SsimKnownValues) {
  std::mt19937_64 rng(9);
  const ImageBuffer a = random_image(rng, 32, 32);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  // Constant images: SSIM reduces to the luminance term.
  const double mu_a = 0.3, mu_b = 0.6, c1 = 1e-4;
  const double expected = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1);
  EXPECT_NEAR(ssim(ImageBuffer(32, 32, mu_a), ImageBuffer(32, 32, mu_b)), expected, 1e-9);
  ImageBuffer noisy = a;
  for (double& v : noisy.data()) v = 1.0 - v;
  EXPECT_LT(ssim(a, noisy), 0.0);
}

}  // namespace
}  // namespace fuselite
