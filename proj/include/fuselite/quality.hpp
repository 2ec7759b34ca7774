#pragma once

#include "fuselite/image.hpp"

namespace fuselite {

inline constexpr double kPsnrCap = 99.0;

// Peak 1.0; identical images report kPsnrCap.
double psnr(const ImageBuffer& a, const ImageBuffer& b);

// PSNR over pixels where mask is 1.
double masked_psnr(const ImageBuffer& a, const ImageBuffer& b, const Bitmap& mask);

// Mean SSIM over channels, 11x11 Gaussian window (sigma 1.5),
// C1 = 0.01^2, C2 = 0.03^2 for unit dynamic range.
double ssim(const ImageBuffer& a, const ImageBuffer& b);

}  // namespace fuselite
