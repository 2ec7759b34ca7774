#include "fuselite/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace fs = std::filesystem;

namespace fuselite {

namespace {

// Bilinearly interpolated lattice noise in [-1, 1].
class ValueNoise {
 public:
  ValueNoise(std::mt19937_64& rng, Size size, double cell)
      : cell_(cell),
        gw_(static_cast<int>(std::ceil(size.width / cell)) + 2),
        gh_(static_cast<int>(std::ceil(size.height / cell)) + 2),
        lattice_(static_cast<std::size_t>(gw_) * gh_) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (double& v : lattice_) {
      v = u(rng);
    }
  }

  double operator()(double x, double y) const {
    const double gx = x / cell_;
    const double gy = y / cell_;
    const int x0 = static_cast<int>(gx);
    const int y0 = static_cast<int>(gy);
    const double fx = smooth(gx - x0);
    const double fy = smooth(gy - y0);
    const double a = at(x0, y0) * (1 - fx) + at(x0 + 1, y0) * fx;
    const double b = at(x0, y0 + 1) * (1 - fx) + at(x0 + 1, y0 + 1) * fx;
    return a * (1 - fy) + b * fy;
  }

 private:
  static double smooth(double t) { return t * t * (3.0 - 2.0 * t); }
  double at(int x, int y) const { return lattice_[static_cast<std::size_t>(y) * gw_ + x]; }

  double cell_;
  int gw_;
  int gh_;
  std::vector<double> lattice_;
};

struct Shape2D {
  enum Kind { rect, ellipse, stripes } kind;
  double cx, cy, rx, ry, angle;
  double log_radiance;
  std::array<double, 3> tint;
  double period;
};

bool inside(const Shape2D& s, double x, double y, double& stripe) {
  const double c = std::cos(s.angle);
  const double sn = std::sin(s.angle);
  const double dx = x - s.cx;
  const double dy = y - s.cy;
  const double u = c * dx + sn * dy;
  const double v = -sn * dx + c * dy;
  stripe = 1.0;
  switch (s.kind) {
    case Shape2D::rect:
      return std::abs(u) <= s.rx && std::abs(v) <= s.ry;
    case Shape2D::ellipse:
      return (u * u) / (s.rx * s.rx) + (v * v) / (s.ry * s.ry) <= 1.0;
    case Shape2D::stripes:
      if (std::abs(u) <= s.rx && std::abs(v) <= s.ry) {
        stripe = std::fmod(std::abs(u) + 1000.0 * s.period, s.period) < s.period / 2 ? 1.0 : 0.25;
        return true;
      }
      return false;
  }
  return false;
}

}  // namespace

ImageBuffer render_radiance(std::mt19937_64& rng, Size size) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double w = size.width;
  const double h = size.height;
  const double scale = std::min(w, h);

  // Background: a tilted log-radiance ramp.
  const double base = -2.0 + 1.5 * u01(rng);
  const double gx = (u01(rng) - 0.5) * 3.0;
  const double gy = (u01(rng) - 0.5) * 3.0;
  const std::array<double, 3> bg_tint{0.7 + 0.6 * u01(rng), 0.7 + 0.6 * u01(rng), 0.7 + 0.6 * u01(rng)};

  std::vector<Shape2D> shapes;
  const int count = 14 + static_cast<int>(u01(rng) * 10);
  for (int i = 0; i < count; ++i) {
    Shape2D s{};
    const double k = u01(rng);
    s.kind = k < 0.45 ? Shape2D::rect : (k < 0.85 ? Shape2D::ellipse : Shape2D::stripes);
    s.cx = u01(rng) * w;
    s.cy = u01(rng) * h;
    s.rx = scale * (0.04 + 0.2 * u01(rng));
    s.ry = scale * (0.04 + 0.2 * u01(rng));
    s.angle = u01(rng) * 3.14159265358979;
    s.log_radiance = -4.0 + 8.0 * u01(rng);
    s.tint = {0.5 + u01(rng), 0.5 + u01(rng), 0.5 + u01(rng)};
    s.period = scale * (0.02 + 0.05 * u01(rng));
    shapes.push_back(s);
  }

  const ValueNoise coarse(rng, size, scale / 6.0);
  const ValueNoise fine(rng, size, std::max(3.0, scale / 40.0));

  ImageBuffer radiance(size.width, size.height, 0.0, ColorSpace::linear);
  for (int y = 0; y < size.height; ++y) {
    for (int x = 0; x < size.width; ++x) {
      const double px = x + 0.5;
      const double py = y + 0.5;
      double log_l = base + gx * (px / w - 0.5) + gy * (py / h - 0.5) + 0.8 * coarse(px, py);
      std::array<double, 3> tint = bg_tint;
      for (const auto& s : shapes) {
        double stripe = 1.0;
        if (inside(s, px, py, stripe)) {
          log_l = s.log_radiance + std::log2(stripe);
          tint = s.tint;
        }
      }
      log_l += 0.35 * fine(px, py);
      const double l = std::exp2(log_l);
      for (int c = 0; c < 3; ++c) {
        radiance.at(x, y, c) = l * tint[c];
      }
    }
  }
  return radiance;
}

ImageBuffer expose(const ImageBuffer& radiance, double ev) {
  ImageBuffer out(radiance.width(), radiance.height(), 0.0, ColorSpace::srgb);
  const double gain = std::exp2(ev);
  for (std::size_t i = 0; i < out.data().size(); ++i) {
    out.data()[i] = std::clamp(std::pow(radiance.data()[i] * gain, 1.0 / 2.2), 0.0, 1.0);
  }
  return out;
}

ImageBuffer tone_map_reference(const ImageBuffer& radiance) {
  // Reinhard curve on log-average-keyed radiance.
  double log_sum = 0.0;
  for (double v : radiance.data()) {
    log_sum += std::log(1e-6 + v);
  }
  const double log_avg = std::exp(log_sum / static_cast<double>(radiance.data().size()));
  const double key = 0.25 / log_avg;
  ImageBuffer out(radiance.width(), radiance.height(), 0.0, ColorSpace::srgb);
  for (std::size_t i = 0; i < out.data().size(); ++i) {
    const double l = radiance.data()[i] * key;
    out.data()[i] = std::clamp(std::pow(l / (1.0 + l), 1.0 / 2.2), 0.0, 1.0);
  }
  return out;
}

std::vector<std::string> write_synthetic_dataset(const fs::path& root, const SyntheticDatasetOptions& options) {
  require(options.scenes > 0 && options.exposures >= 2, ErrorCode::InvalidArgument,
          "need at least one scene and two exposures");
  std::mt19937_64 rng(options.seed);
  std::vector<std::string> ids;
  for (int s = 0; s < options.scenes; ++s) {
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%03d", s + 1);
    ids.emplace_back(name);
    ImageBuffer radiance = render_radiance(rng, options.size);
    // Log-average to mid grey so EV 0 is a normal exposure.
    double log_sum = 0.0;
    for (double v : radiance.data()) {
      log_sum += std::log(1e-6 + v);
    }
    const double gain = 0.18 / std::exp(log_sum / static_cast<double>(radiance.data().size()));
    for (double& v : radiance.data()) {
      v *= gain;
    }

    std::vector<int> slots(static_cast<std::size_t>(options.exposures));
    std::iota(slots.begin(), slots.end(), 1);
    std::shuffle(slots.begin(), slots.end(), rng);
    for (int e = 0; e < options.exposures; ++e) {
      const double t = static_cast<double>(e) / (options.exposures - 1);
      const double ev = options.min_ev + t * (options.max_ev - options.min_ev);
      write_image(root / name / (std::to_string(slots[static_cast<std::size_t>(e)]) + ".png"),
                  expose(radiance, ev));
    }
    write_image(root / "reference" / (std::string(name) + ".png"), tone_map_reference(radiance));
  }
  return ids;
}

}  // namespace fuselite
