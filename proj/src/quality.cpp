#include "fuselite/quality.hpp"

#include <cmath>

#include <opencv2/imgproc.hpp>

namespace fuselite {

namespace {

double psnr_from_mse(double mse) {
  if (mse <= 0.0) {
    return kPsnrCap;
  }
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

cv::Mat channel_mat(const ImageBuffer& image, int c) {
  cv::Mat m(image.height(), image.width(), CV_64F);
  for (int y = 0; y < image.height(); ++y) {
    auto* row = m.ptr<double>(y);
    for (int x = 0; x < image.width(); ++x) {
      row[x] = image.at(x, y, c);
    }
  }
  return m;
}

}  // namespace

double psnr(const ImageBuffer& a, const ImageBuffer& b) {
  require(a.size() == b.size(), ErrorCode::DimensionMismatch, "PSNR inputs differ in size");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    sum += d * d;
  }
  return psnr_from_mse(sum / static_cast<double>(a.data().size()));
}

double masked_psnr(const ImageBuffer& a, const ImageBuffer& b, const Bitmap& mask) {
  require(a.size() == b.size() && mask.width == a.width() && mask.height == a.height(),
          ErrorCode::DimensionMismatch, "masked PSNR inputs differ in size");
  double sum = 0.0;
  std::size_t count = 0;
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) {
      if (!mask.at(x, y)) {
        continue;
      }
      for (int c = 0; c < ImageBuffer::kChannels; ++c) {
        const double d = a.at(x, y, c) - b.at(x, y, c);
        sum += d * d;
      }
      count += ImageBuffer::kChannels;
    }
  }
  return count == 0 ? kPsnrCap : psnr_from_mse(sum / static_cast<double>(count));
}

double ssim(const ImageBuffer& a, const ImageBuffer& b) {
  require(a.size() == b.size(), ErrorCode::DimensionMismatch, "SSIM inputs differ in size");
  const double c1 = 0.01 * 0.01;
  const double c2 = 0.03 * 0.03;
  const cv::Size window(11, 11);
  double total = 0.0;
  for (int c = 0; c < ImageBuffer::kChannels; ++c) {
    const cv::Mat x = channel_mat(a, c);
    const cv::Mat y = channel_mat(b, c);
    cv::Mat mx, my, sxx, syy, sxy;
    cv::GaussianBlur(x, mx, window, 1.5);
    cv::GaussianBlur(y, my, window, 1.5);
    cv::GaussianBlur(x.mul(x), sxx, window, 1.5);
    cv::GaussianBlur(y.mul(y), syy, window, 1.5);
    cv::GaussianBlur(x.mul(y), sxy, window, 1.5);
    const cv::Mat mx2 = mx.mul(mx);
    const cv::Mat my2 = my.mul(my);
    const cv::Mat mxy = mx.mul(my);
    sxx -= mx2;
    syy -= my2;
    sxy -= mxy;
    const cv::Mat num = (2 * mxy + c1).mul(2 * sxy + c2);
    const cv::Mat den = (mx2 + my2 + c1).mul(sxx + syy + c2);
    cv::Mat map;
    cv::divide(num, den, map);
    total += cv::mean(map)[0];
  }
  return total / ImageBuffer::kChannels;
}

}  // namespace fuselite
