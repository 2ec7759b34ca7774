#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fuselite/tensor.hpp"

namespace fuselite {

enum class ColorSpace { srgb, linear };

struct Size {
  int width = 0;
  int height = 0;
  friend bool operator==(const Size&, const Size&) = default;
};

// H x W x 3 interleaved RGB raster, values nominally in [0, 1].
class ImageBuffer {
 public:
  static constexpr int kChannels = 3;

  ImageBuffer() = default;
  ImageBuffer(int width, int height, double fill = 0.0, ColorSpace space = ColorSpace::srgb);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  Size size() const noexcept { return {width_, height_}; }
  bool empty() const noexcept { return data_.empty(); }
  ColorSpace color_space() const noexcept { return space_; }
  void set_color_space(ColorSpace space) noexcept { space_ = space; }

  double& at(int x, int y, int c) noexcept {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * kChannels + c];
  }
  double at(int x, int y, int c) const noexcept {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * kChannels + c];
  }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  ColorSpace space_ = ColorSpace::srgb;
  std::vector<double> data_;
};

// Single-channel real map (luma and similar).
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  GrayImage() = default;
  GrayImage(int w, int h, double fill = 0.0)
      : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {}

  double& at(int x, int y) noexcept { return values[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const noexcept { return values[static_cast<std::size_t>(y) * width + x]; }
};

// Binary map with values in {0, 1}.
struct Bitmap {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  Bitmap() = default;
  Bitmap(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), bits(static_cast<std::size_t>(w) * h, fill) {}

  std::uint8_t& at(int x, int y) noexcept { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const noexcept {
    return bits[static_cast<std::size_t>(y) * width + x];
  }
  std::size_t count() const noexcept;

  friend bool operator==(const Bitmap&, const Bitmap&) = default;
};

// Decodes PNG/JPEG (8 or 16 bit) into [0, 1]; throws DecodeError.
ImageBuffer read_image(const std::filesystem::path& path);

// Writes PNG (or any extension OpenCV knows) at 8 or 16 bits per channel.
void write_image(const std::filesystem::path& path, const ImageBuffer& image, int bit_depth = 8);

// 1-bit PNG of a bitmap (0 -> black, 1 -> white).
void write_bitmap(const std::filesystem::path& path, const Bitmap& bitmap);

// Area averaging when shrinking, bilinear when growing.
ImageBuffer resize_image(const ImageBuffer& image, Size size);

ImageBuffer crop(const ImageBuffer& image, int x0, int y0, int width, int height);

// Mirror padding (edge pixel not repeated) on the right and bottom.
ImageBuffer reflect_pad(const ImageBuffer& image, int right, int bottom);

// Rounds to the 8-bit grid, as an 8-bit encode/decode would.
ImageBuffer quantize_8bit(const ImageBuffer& image);

template <typename T>
Tensor<T> to_tensor(const ImageBuffer& image);

template <typename T>
Tensor<T> to_tensor(const Bitmap& bitmap);

// Batches images into (N, 3, H, W).
template <typename T>
Tensor<T> stack_images(const std::vector<const ImageBuffer*>& images);

// Reads sample `n` of a (N, 3, H, W) tensor, clamping to [0, 1].
template <typename T>
ImageBuffer from_tensor(const Tensor<T>& tensor, int n = 0);

}  // namespace fuselite
