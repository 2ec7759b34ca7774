#include "fuselite/geometry.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <sstream>

namespace fuselite {

namespace {

constexpr double kMinW = 1e-12;
constexpr double kMaxCondition = 1e12;

void require_finite(const CornerOffsets& o) {
  for (int i = 0; i < 4; ++i) {
    require(std::isfinite(o.du[i]) && std::isfinite(o.dv[i]), ErrorCode::InvalidArgument,
            "corner offsets must be finite");
  }
}

}  // namespace

std::array<double, 8> CornerOffsets::flat() const {
  std::array<double, 8> out{};
  for (int i = 0; i < 4; ++i) {
    out[2 * i] = du[i];
    out[2 * i + 1] = dv[i];
  }
  return out;
}

CornerOffsets CornerOffsets::from_flat(const std::array<double, 8>& values, Size patch_size) {
  CornerOffsets o;
  for (int i = 0; i < 4; ++i) {
    o.du[i] = values[2 * i];
    o.dv[i] = values[2 * i + 1];
  }
  o.patch_size = patch_size;
  return o;
}

std::array<Eigen::Vector2d, 4> patch_corners(Size patch_size) {
  const double w = patch_size.width;
  const double h = patch_size.height;
  return {Eigen::Vector2d(0.0, 0.0), Eigen::Vector2d(w, 0.0), Eigen::Vector2d(w, h),
          Eigen::Vector2d(0.0, h)};
}

HomographyMatrix HomographyMatrix::translation(double tx, double ty) {
  HomographyMatrix h;
  h.m(0, 2) = tx;
  h.m(1, 2) = ty;
  return h;
}

Eigen::Vector2d HomographyMatrix::apply(const Eigen::Vector2d& p) const {
  const Eigen::Vector3d q = m * p.homogeneous();
  require(q.z() >= kMinW, ErrorCode::DegenerateMatrix, "point maps to infinity");
  return q.hnormalized();
}

HomographyMatrix HomographyMatrix::inverse() const {
  require(std::abs(m.determinant()) > kMinW, ErrorCode::DegenerateMatrix, "homography is singular");
  return HomographyMatrix{m.inverse()}.normalized();
}

HomographyMatrix HomographyMatrix::operator*(const HomographyMatrix& rhs) const {
  return HomographyMatrix{m * rhs.m}.normalized();
}

HomographyMatrix HomographyMatrix::normalized() const {
  require(std::abs(m(2, 2)) > kMinW, ErrorCode::DegenerateMatrix, "m(2,2) is zero");
  return HomographyMatrix{m / m(2, 2)};
}

HomographyMatrix offsets_to_matrix(const CornerOffsets& offsets) {
  require_finite(offsets);
  const Size size = offsets.patch_size;
  require(size.width > 0 && size.height > 0, ErrorCode::InvalidArgument, "patch size must be positive");

  // Map both point sets through the same normalization so the patch corners land on [-1, 1].
  Eigen::Matrix3d norm = Eigen::Matrix3d::Identity();
  norm(0, 0) = 2.0 / size.width;
  norm(1, 1) = 2.0 / size.height;
  norm(0, 2) = -1.0;
  norm(1, 2) = -1.0;

  const auto corners = patch_corners(size);
  Eigen::Matrix<double, 8, 8> a;
  Eigen::Matrix<double, 8, 1> b;
  for (int i = 0; i < 4; ++i) {
    const Eigen::Vector3d src = norm * corners[i].homogeneous();
    const Eigen::Vector2d moved = corners[i] + Eigen::Vector2d(offsets.du[i], offsets.dv[i]);
    const Eigen::Vector3d dst = norm * moved.homogeneous();
    const double x = src.x();
    const double y = src.y();
    const double u = dst.x();
    const double v = dst.y();
    a.row(2 * i) << x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y;
    a.row(2 * i + 1) << 0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y;
    b(2 * i) = u;
    b(2 * i + 1) = v;
  }

  Eigen::JacobiSVD<Eigen::Matrix<double, 8, 8>> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  require(sv(7) > 0.0 && sv(0) / sv(7) <= kMaxCondition, ErrorCode::DegenerateCorners,
          "corner correspondences are degenerate");
  const Eigen::Matrix<double, 8, 1> h = svd.solve(b);

  Eigen::Matrix3d hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;
  require(std::abs(hn.determinant()) > kMinW, ErrorCode::DegenerateCorners,
          "displaced corners collapse the patch");
  return HomographyMatrix{norm.inverse() * hn * norm}.normalized();
}

CornerOffsets matrix_to_offsets(const HomographyMatrix& h, Size patch_size) {
  const HomographyMatrix hn = h.normalized();
  CornerOffsets out;
  out.patch_size = patch_size;
  const auto corners = patch_corners(patch_size);
  for (int i = 0; i < 4; ++i) {
    const Eigen::Vector2d moved = hn.apply(corners[i]);
    out.du[i] = moved.x() - corners[i].x();
    out.dv[i] = moved.y() - corners[i].y();
  }
  return out;
}

WarpResult warp_image(const ImageBuffer& src, const HomographyMatrix& h, Size out_size, double fill) {
  require(out_size.width > 0 && out_size.height > 0, ErrorCode::InvalidArgument,
          "warp output size must be positive");
  require(!src.empty(), ErrorCode::InvalidArgument, "cannot warp an empty image");
  const Eigen::Matrix3d inv = h.inverse().m;
  const int sw = src.width();
  const int sh = src.height();

  WarpResult result{ImageBuffer(out_size.width, out_size.height, fill, src.color_space()),
                    Bitmap(out_size.width, out_size.height, 0)};
  for (int y = 0; y < out_size.height; ++y) {
    for (int x = 0; x < out_size.width; ++x) {
      const Eigen::Vector3d q = inv * Eigen::Vector3d(x + 0.5, y + 0.5, 1.0);
      if (std::abs(q.z()) < kMinW) {
        continue;
      }
      const double sx = q.x() / q.z();
      const double sy = q.y() / q.z();
      if (!(sx >= 0.0 && sx <= sw && sy >= 0.0 && sy <= sh)) {
        continue;
      }
      // Array coordinates of pixel centers; neighbors clamp at the half-pixel rim.
      const double ax = sx - 0.5;
      const double ay = sy - 0.5;
      const int x0 = static_cast<int>(std::floor(ax));
      const int y0 = static_cast<int>(std::floor(ay));
      const double fx = ax - x0;
      const double fy = ay - y0;
      const int xa = std::clamp(x0, 0, sw - 1);
      const int xb = std::clamp(x0 + 1, 0, sw - 1);
      const int ya = std::clamp(y0, 0, sh - 1);
      const int yb = std::clamp(y0 + 1, 0, sh - 1);
      for (int c = 0; c < 3; ++c) {
        const double top = (1.0 - fx) * src.at(xa, ya, c) + fx * src.at(xb, ya, c);
        const double bottom = (1.0 - fx) * src.at(xa, yb, c) + fx * src.at(xb, yb, c);
        result.image.at(x, y, c) = (1.0 - fy) * top + fy * bottom;
      }
      result.validity.at(x, y) = 1;
    }
  }
  return result;
}

CornerOffsets rescale_offsets(const CornerOffsets& offsets, Size from_size, Size to_size) {
  require(from_size.width > 0 && from_size.height > 0 && to_size.width > 0 && to_size.height > 0,
          ErrorCode::InvalidArgument, "rescale sizes must be positive");
  const double sx = static_cast<double>(to_size.width) / from_size.width;
  const double sy = static_cast<double>(to_size.height) / from_size.height;
  CornerOffsets out = offsets;
  for (int i = 0; i < 4; ++i) {
    out.du[i] *= sx;
    out.dv[i] *= sy;
  }
  out.patch_size = to_size;
  return out;
}

CornerOffsets sample_random_offsets(std::mt19937_64& rng, Size patch_size, double max_disturbance) {
  require(max_disturbance > 0.0, ErrorCode::InvalidArgument, "max_disturbance must be positive");
  std::normal_distribution<double> normal(0.0, max_disturbance / 2.0);
  auto draw = [&] {
    double v = 0.0;
    do {
      v = normal(rng);
    } while (std::abs(v) > max_disturbance);
    return v;
  };
  CornerOffsets out;
  out.patch_size = patch_size;
  for (int i = 0; i < 4; ++i) {
    out.du[i] = draw();
    out.dv[i] = draw();
  }
  return out;
}

double mean_corner_error(const CornerOffsets& predicted, const CornerOffsets& truth) {
  require(predicted.patch_size == truth.patch_size, ErrorCode::PatchSizeMismatch,
          "corner offsets expressed in different patch sizes");
  double acc = 0.0;
  for (int i = 0; i < 4; ++i) {
    acc += std::hypot(predicted.du[i] - truth.du[i], predicted.dv[i] - truth.dv[i]);
  }
  return acc / 4.0;
}

nlohmann::json homography_to_json(const HomographyMatrix& h) {
  nlohmann::json values = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      values.push_back(h.m(r, c));
    }
  }
  return {{"h", values}};
}

HomographyMatrix homography_from_json(const nlohmann::json& j) {
  const auto& values = j.at("h");
  require(values.is_array() && values.size() == 9, ErrorCode::InvalidArgument,
          "homography needs 9 numbers");
  HomographyMatrix h;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      h.m(r, c) = values.at(static_cast<std::size_t>(3 * r + c)).get<double>();
    }
  }
  return h;
}

nlohmann::json offsets_to_json(const CornerOffsets& offsets) {
  return {{"du", offsets.du},
          {"dv", offsets.dv},
          {"patch_size", {offsets.patch_size.width, offsets.patch_size.height}}};
}

CornerOffsets offsets_from_json(const nlohmann::json& j) {
  CornerOffsets o;
  o.du = j.at("du").get<std::array<double, 4>>();
  o.dv = j.at("dv").get<std::array<double, 4>>();
  const auto size = j.at("patch_size").get<std::array<int, 2>>();
  o.patch_size = {size[0], size[1]};
  return o;
}

std::string format_row_major(const HomographyMatrix& h) {
  std::ostringstream out;
  out.precision(17);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      out << h.m(r, c) << (r == 2 && c == 2 ? "\n" : " ");
    }
  }
  return out.str();
}

}  // namespace fuselite
