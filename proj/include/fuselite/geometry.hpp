#pragma once

// Homographies in two representations: a 3x3 matrix and the offsets of the
// four patch corners.
//
// Coordinates are continuous: the image spans [0, W] x [0, H] and pixel
// (i, j) has its center at (i + 0.5, j + 0.5). Patch corners are therefore
// (0,0), (W,0), (W,H), (0,H), in the order top-left, top-right,
// bottom-right, bottom-left. A returned matrix maps coordinates of the
// over-exposed image onto the under-exposed image's frame.

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <random>
#include <string>

#include "json.hpp"

#include "fuselite/image.hpp"

namespace fuselite {

struct CornerOffsets {
  std::array<double, 4> du{};
  std::array<double, 4> dv{};
  Size patch_size{256, 256};

  // Interleaved (du0, dv0, du1, dv1, ...).
  std::array<double, 8> flat() const;
  static CornerOffsets from_flat(const std::array<double, 8>& values, Size patch_size);

  friend bool operator==(const CornerOffsets&, const CornerOffsets&) = default;
};

// Corner positions of a patch, TL, TR, BR, BL.
std::array<Eigen::Vector2d, 4> patch_corners(Size patch_size);

struct HomographyMatrix {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();

  static HomographyMatrix identity() { return {}; }
  static HomographyMatrix translation(double tx, double ty);

  // Projects a point; throws DegenerateMatrix when w < 1e-12.
  Eigen::Vector2d apply(const Eigen::Vector2d& p) const;
  HomographyMatrix inverse() const;
  HomographyMatrix operator*(const HomographyMatrix& rhs) const;
  // Scales so that m(2,2) == 1.
  HomographyMatrix normalized() const;
};

struct WarpResult {
  ImageBuffer image;
  Bitmap validity;
};

HomographyMatrix offsets_to_matrix(const CornerOffsets& offsets);

CornerOffsets matrix_to_offsets(const HomographyMatrix& h, Size patch_size);

// Inverse mapping with bilinear sampling: out(p) = src(h^-1 p). Samples whose
// source position falls outside [0, W] x [0, H] get `fill` and validity 0.
WarpResult warp_image(const ImageBuffer& src, const HomographyMatrix& h, Size out_size,
                      double fill = 0.0);

CornerOffsets rescale_offsets(const CornerOffsets& offsets, Size from_size, Size to_size);

// Each component ~ N(0, (max/2)^2) truncated to [-max, max].
CornerOffsets sample_random_offsets(std::mt19937_64& rng, Size patch_size, double max_disturbance);

// Mean Euclidean distance between corresponding displaced corners.
double mean_corner_error(const CornerOffsets& predicted, const CornerOffsets& truth);

nlohmann::json homography_to_json(const HomographyMatrix& h);
HomographyMatrix homography_from_json(const nlohmann::json& j);
nlohmann::json offsets_to_json(const CornerOffsets& offsets);
CornerOffsets offsets_from_json(const nlohmann::json& j);

// Nine numbers, row-major, whitespace separated.
std::string format_row_major(const HomographyMatrix& h);

}  // namespace fuselite
