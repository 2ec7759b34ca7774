#include "fuselite/mtb.hpp"

#include <algorithm>

namespace fuselite {

GrayImage to_grayscale(const ImageBuffer& image) {
  GrayImage gray(image.width(), image.height());
  const auto& src = image.data();
  for (std::size_t i = 0; i < gray.values.size(); ++i) {
    gray.values[i] = 0.299 * src[3 * i] + 0.587 * src[3 * i + 1] + 0.114 * src[3 * i + 2];
  }
  return gray;
}

Bitmap compute_mtb(const GrayImage& gray) {
  Bitmap out(gray.width, gray.height, 0);
  if (gray.values.empty()) {
    return out;
  }
  std::vector<double> sorted = gray.values;
  const std::size_t mid = (sorted.size() - 1) / 2;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(mid), sorted.end());
  const double median = sorted[mid];
  for (std::size_t i = 0; i < gray.values.size(); ++i) {
    out.bits[i] = gray.values[i] > median ? 1 : 0;
  }
  return out;
}

XorDifference xor_difference(const Bitmap& a, const Bitmap& b) {
  require(a.width == b.width && a.height == b.height, ErrorCode::DimensionMismatch,
          "xor_difference: bitmaps differ in size");
  XorDifference out{0.0, Bitmap(a.width, a.height)};
  std::size_t ones = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    out.diff.bits[i] = a.bits[i] ^ b.bits[i];
    ones += out.diff.bits[i];
  }
  out.ratio = a.bits.empty() ? 0.0 : static_cast<double>(ones) / static_cast<double>(a.bits.size());
  return out;
}

double masked_xor_ratio(const Bitmap& a, const Bitmap& b, const Bitmap& mask) {
  require(a.width == b.width && a.height == b.height && a.width == mask.width &&
              a.height == mask.height,
          ErrorCode::DimensionMismatch, "masked_xor_ratio: sizes differ");
  std::size_t considered = 0;
  std::size_t ones = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    if (mask.bits[i]) {
      ++considered;
      ones += a.bits[i] ^ b.bits[i];
    }
  }
  return considered == 0 ? 0.0 : static_cast<double>(ones) / static_cast<double>(considered);
}

TranslationSearch search_translation(const Bitmap& fixed, const Bitmap& moving, int radius) {
  require(fixed.width == moving.width && fixed.height == moving.height, ErrorCode::DimensionMismatch,
          "search_translation: sizes differ");
  TranslationSearch best;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      std::size_t considered = 0;
      std::size_t ones = 0;
      for (int y = std::max(0, dy); y < std::min(fixed.height, fixed.height + dy); ++y) {
        for (int x = std::max(0, dx); x < std::min(fixed.width, fixed.width + dx); ++x) {
          ++considered;
          ones += fixed.at(x, y) ^ moving.at(x - dx, y - dy);
        }
      }
      if (considered == 0) {
        continue;
      }
      const double ratio = static_cast<double>(ones) / static_cast<double>(considered);
      if (ratio < best.ratio) {
        best = {dx, dy, ratio};
      }
    }
  }
  return best;
}

}  // namespace fuselite
