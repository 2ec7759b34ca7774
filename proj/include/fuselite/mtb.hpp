#pragma once

// Median threshold bitmaps and their XOR difference.

#include "fuselite/image.hpp"

namespace fuselite {

// Rec.601 luma: 0.299 R + 0.587 G + 0.114 B.
GrayImage to_grayscale(const ImageBuffer& image);

// bit = gray > lower median of all pixels. Ties stay 0, so a constant image
// yields an all-zero bitmap.
Bitmap compute_mtb(const GrayImage& gray);

inline Bitmap compute_mtb(const ImageBuffer& image) { return compute_mtb(to_grayscale(image)); }

struct XorDifference {
  double ratio = 0.0;
  Bitmap diff;
};

// Throws DimensionMismatch when the bitmaps differ in size.
XorDifference xor_difference(const Bitmap& a, const Bitmap& b);

// XOR ratio restricted to pixels where `mask` is 1; 0 for an empty mask.
double masked_xor_ratio(const Bitmap& a, const Bitmap& b, const Bitmap& mask);

// Exhaustive integer-translation search minimizing the XOR ratio of `moving`
// against `fixed` over the overlap; the classic bitmap alignment baseline.
struct TranslationSearch {
  int dx = 0;
  int dy = 0;
  double ratio = 1.0;
};
TranslationSearch search_translation(const Bitmap& fixed, const Bitmap& moving, int radius);

}  // namespace fuselite
