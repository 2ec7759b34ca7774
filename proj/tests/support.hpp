#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include <Eigen/Core>

#include "fuselite/autograd.hpp"
#include "fuselite/image.hpp"

namespace fuselite::testing {

inline ImageBuffer random_image(std::mt19937_64& rng, int width, int height) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageBuffer img(width, height);
  for (double& v : img.data()) {
    v = u(rng);
  }
  return img;
}

template <typename T>
Tensor<T> random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(shape);
  for (auto& v : t.values()) {
    v = static_cast<T>(u(rng));
  }
  return t;
}

// Central differences of `loss()` with respect to every element of `x`.
template <typename F>
Tensor<double> numeric_gradient(ag::Var<double>& x, F&& loss, double h = 1e-3) {
  Tensor<double> g(x.shape());
  Tensor<double>& v = x.mutable_value();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + h;
    const double up = loss();
    v[i] = keep - h;
    const double down = loss();
    v[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||); 0 when both vanish.
inline double relative_error(const Tensor<double>& a, const Tensor<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

inline double max_abs(const Tensor<double>& t) {
  double m = 0.0;
  for (double v : t.values()) {
    m = std::max(m, std::abs(v));
  }
  return m;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("fuselite_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

struct OracleSample {
  bool valid = false;
  std::array<double, 3> rgb{};
};

// Brute-force warp of one output pixel centre: solves H s = p for the source
// point by Cramer's rule and applies tent-weighted bilinear sampling.
inline OracleSample oracle_sample(const ImageBuffer& src, const Eigen::Matrix3d& h, double px, double py) {
  const double a = h(0, 0) - px * h(2, 0), b = h(0, 1) - px * h(2, 1), e = px * h(2, 2) - h(0, 2);
  const double c = h(1, 0) - py * h(2, 0), d = h(1, 1) - py * h(2, 1), f = py * h(2, 2) - h(1, 2);
  const double det = a * d - b * c;
  OracleSample out;
  if (std::abs(det) < 1e-15) {
    return out;
  }
  const double sx = (e * d - b * f) / det;
  const double sy = (a * f - e * c) / det;
  if (sx < 0.0 || sx > src.width() || sy < 0.0 || sy > src.height()) {
    return out;
  }
  out.valid = true;
  const double ax = sx - 0.5, ay = sy - 0.5;
  const int ix = static_cast<int>(std::floor(ax)), iy = static_cast<int>(std::floor(ay));
  for (int j = iy; j <= iy + 1; ++j) {
    for (int i = ix; i <= ix + 1; ++i) {
      const double wgt = std::max(0.0, 1.0 - std::abs(ax - i)) * std::max(0.0, 1.0 - std::abs(ay - j));
      const int ci = std::clamp(i, 0, src.width() - 1);
      const int cj = std::clamp(j, 0, src.height() - 1);
      for (int ch = 0; ch < 3; ++ch) {
        out.rgb[ch] += wgt * src.at(ci, cj, ch);
      }
    }
  }
  return out;
}

}  // namespace fuselite::testing
