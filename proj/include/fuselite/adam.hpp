#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "fuselite/autograd.hpp"

namespace fuselite {

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adaptive-moment optimizer over a fixed list of leaves. Parameters whose
// gradient is empty for a step are left untouched (their moments still decay
// only when they receive a gradient).
template <typename T>
class Adam {
 public:
  struct Moments {
    Tensor<T> m;
    Tensor<T> v;
  };

  Adam(std::vector<ag::Var<T>> params, AdamOptions options)
      : params_(std::move(params)), options_(options), moments_(params_.size()) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      moments_[i].m = Tensor<T>(params_[i].shape());
      moments_[i].v = Tensor<T>(params_[i].shape());
    }
  }

  void zero_grad() {
    for (auto& p : params_) {
      p.zero_grad();
    }
  }

  void step() {
    ++steps_;
    const double b1 = options_.beta1;
    const double b2 = options_.beta2;
    const double correction1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double correction2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    const double lr = options_.learning_rate;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const Tensor<T>& g = params_[i].grad();
      if (g.empty()) {
        continue;
      }
      Tensor<T>& w = params_[i].mutable_value();
      Tensor<T>& m = moments_[i].m;
      Tensor<T>& v = moments_[i].v;
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g[k];
        const double mk = b1 * m[k] + (1.0 - b1) * gk;
        const double vk = b2 * v[k] + (1.0 - b2) * gk * gk;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        const double update = lr * (mk / correction1) / (std::sqrt(vk / correction2) + options_.epsilon);
        w[k] = static_cast<T>(w[k] - update);
      }
    }
  }

  std::int64_t steps() const noexcept { return steps_; }
  void set_steps(std::int64_t steps) noexcept { steps_ = steps; }
  const AdamOptions& options() const noexcept { return options_; }
  std::vector<Moments>& moments() noexcept { return moments_; }
  const std::vector<Moments>& moments() const noexcept { return moments_; }

 private:
  std::vector<ag::Var<T>> params_;
  AdamOptions options_;
  std::vector<Moments> moments_;
  std::int64_t steps_ = 0;
};

}  // namespace fuselite
