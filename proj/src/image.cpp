#include "fuselite/image.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fuselite {

ImageBuffer::ImageBuffer(int width, int height, double fill, ColorSpace space)
    : width_(width), height_(height), space_(space),
      data_(static_cast<std::size_t>(width) * height * kChannels, fill) {
  require(width >= 0 && height >= 0, ErrorCode::InvalidArgument, "negative image size");
}

std::size_t Bitmap::count() const noexcept {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

namespace {

cv::Mat to_mat(const ImageBuffer& image) {
  cv::Mat mat(image.height(), image.width(), CV_64FC3);
  for (int y = 0; y < image.height(); ++y) {
    auto* row = mat.ptr<cv::Vec3d>(y);
    for (int x = 0; x < image.width(); ++x) {
      row[x] = cv::Vec3d(image.at(x, y, 0), image.at(x, y, 1), image.at(x, y, 2));
    }
  }
  return mat;
}

ImageBuffer from_mat(const cv::Mat& mat, ColorSpace space) {
  ImageBuffer image(mat.cols, mat.rows, 0.0, space);
  for (int y = 0; y < mat.rows; ++y) {
    const auto* row = mat.ptr<cv::Vec3d>(y);
    for (int x = 0; x < mat.cols; ++x) {
      for (int c = 0; c < 3; ++c) {
        image.at(x, y, c) = row[x][c];
      }
    }
  }
  return image;
}

}  // namespace

ImageBuffer read_image(const std::filesystem::path& path) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_ANYDEPTH | cv::IMREAD_COLOR);
  require(!raw.empty(), ErrorCode::DecodeError, "cannot decode image " + path.string());
  const double scale = raw.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0;
  cv::Mat rgb;
  cv::cvtColor(raw, rgb, cv::COLOR_BGR2RGB);
  cv::Mat real;
  rgb.convertTo(real, CV_64FC3, scale);
  return from_mat(real, ColorSpace::srgb);
}

void write_image(const std::filesystem::path& path, const ImageBuffer& image, int bit_depth) {
  require(bit_depth == 8 || bit_depth == 16, ErrorCode::InvalidArgument, "bit depth must be 8 or 16");
  require(!image.empty(), ErrorCode::InvalidArgument, "cannot write an empty image");
  const double max_value = bit_depth == 8 ? 255.0 : 65535.0;
  cv::Mat out(image.height(), image.width(), bit_depth == 8 ? CV_8UC3 : CV_16UC3);
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at(x, y, c), 0.0, 1.0) * max_value;
        const auto q = static_cast<int>(std::lround(v));
        // OpenCV stores BGR.
        if (bit_depth == 8) {
          out.at<cv::Vec3b>(y, x)[2 - c] = static_cast<std::uint8_t>(q);
        } else {
          out.at<cv::Vec3w>(y, x)[2 - c] = static_cast<std::uint16_t>(q);
        }
      }
    }
  }
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  require(cv::imwrite(path.string(), out), ErrorCode::IoError, "cannot write " + path.string());
}

void write_bitmap(const std::filesystem::path& path, const Bitmap& bitmap) {
  cv::Mat out(bitmap.height, bitmap.width, CV_8UC1);
  for (int y = 0; y < bitmap.height; ++y) {
    for (int x = 0; x < bitmap.width; ++x) {
      out.at<std::uint8_t>(y, x) = bitmap.at(x, y) ? 255 : 0;
    }
  }
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  const std::vector<int> params{cv::IMWRITE_PNG_BILEVEL, 1};
  require(cv::imwrite(path.string(), out, params), ErrorCode::IoError,
          "cannot write " + path.string());
}

ImageBuffer resize_image(const ImageBuffer& image, Size size) {
  require(size.width > 0 && size.height > 0, ErrorCode::InvalidArgument, "resize target must be positive");
  if (image.size() == size) {
    return image;
  }
  const bool shrink = size.width < image.width() || size.height < image.height();
  cv::Mat out;
  cv::resize(to_mat(image), out, cv::Size(size.width, size.height), 0, 0,
             shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
  return from_mat(out, image.color_space());
}

ImageBuffer crop(const ImageBuffer& image, int x0, int y0, int width, int height) {
  require(x0 >= 0 && y0 >= 0 && width >= 0 && height >= 0 && x0 + width <= image.width() &&
              y0 + height <= image.height(),
          ErrorCode::DimensionMismatch, "crop window outside image");
  ImageBuffer out(width, height, 0.0, image.color_space());
  for (int y = 0; y < height; ++y) {
    const double* src = &image.data()[(static_cast<std::size_t>(y0 + y) * image.width() + x0) * 3];
    std::copy(src, src + static_cast<std::size_t>(width) * 3,
              &out.data()[static_cast<std::size_t>(y) * width * 3]);
  }
  return out;
}

namespace {
int reflect_index(int i, int n) {
  if (n == 1) {
    return 0;
  }
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) {
    i += period;
  }
  return i < n ? i : period - i;
}
}  // namespace

ImageBuffer reflect_pad(const ImageBuffer& image, int right, int bottom) {
  require(right >= 0 && bottom >= 0, ErrorCode::InvalidArgument, "negative padding");
  const int w = image.width() + right;
  const int h = image.height() + bottom;
  ImageBuffer out(w, h, 0.0, image.color_space());
  for (int y = 0; y < h; ++y) {
    const int sy = reflect_index(y, image.height());
    for (int x = 0; x < w; ++x) {
      const int sx = reflect_index(x, image.width());
      for (int c = 0; c < 3; ++c) {
        out.at(x, y, c) = image.at(sx, sy, c);
      }
    }
  }
  return out;
}

ImageBuffer quantize_8bit(const ImageBuffer& image) {
  ImageBuffer out = image;
  for (double& v : out.data()) {
    v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) * (1.0 / 255.0);
  }
  return out;
}

template <typename T>
Tensor<T> to_tensor(const ImageBuffer& image) {
  return stack_images<T>({&image});
}

template <typename T>
Tensor<T> to_tensor(const Bitmap& bitmap) {
  Tensor<T> out(Shape{1, 1, bitmap.height, bitmap.width});
  for (std::size_t i = 0; i < bitmap.bits.size(); ++i) {
    out[i] = static_cast<T>(bitmap.bits[i]);
  }
  return out;
}

template <typename T>
Tensor<T> stack_images(const std::vector<const ImageBuffer*>& images) {
  require(!images.empty(), ErrorCode::InvalidArgument, "no images to stack");
  const Size size = images.front()->size();
  Tensor<T> out(Shape{static_cast<int>(images.size()), 3, size.height, size.width});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const ImageBuffer& image = *images[n];
    require(image.size() == size, ErrorCode::ShapeMismatch, "stacked images differ in size");
    for (int c = 0; c < 3; ++c) {
      T* dst = out.channel(static_cast<int>(n), c);
      for (int y = 0; y < size.height; ++y) {
        for (int x = 0; x < size.width; ++x) {
          dst[static_cast<std::size_t>(y) * size.width + x] = static_cast<T>(image.at(x, y, c));
        }
      }
    }
  }
  return out;
}

template <typename T>
ImageBuffer from_tensor(const Tensor<T>& tensor, int n) {
  const Shape& s = tensor.shape();
  require(s.c == 3 && n >= 0 && n < s.n, ErrorCode::ShapeMismatch,
          "expected a 3-channel tensor, got " + s.str());
  ImageBuffer image(s.w, s.h);
  for (int c = 0; c < 3; ++c) {
    const T* src = tensor.channel(n, c);
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        image.at(x, y, c) = std::clamp(static_cast<double>(src[static_cast<std::size_t>(y) * s.w + x]), 0.0, 1.0);
      }
    }
  }
  return image;
}

template Tensor<float> to_tensor<float>(const ImageBuffer&);
template Tensor<double> to_tensor<double>(const ImageBuffer&);
template Tensor<float> to_tensor<float>(const Bitmap&);
template Tensor<double> to_tensor<double>(const Bitmap&);
template Tensor<float> stack_images<float>(const std::vector<const ImageBuffer*>&);
template Tensor<double> stack_images<double>(const std::vector<const ImageBuffer*>&);
template ImageBuffer from_tensor<float>(const Tensor<float>&, int);
template ImageBuffer from_tensor<double>(const Tensor<double>&, int);

}  // namespace fuselite
