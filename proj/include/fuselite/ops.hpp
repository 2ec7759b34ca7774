#pragma once

// Differentiable layer primitives. All spatial ops use zero "same" padding:
// output extent ceil(in / stride), with any odd leftover padding placed on
// the bottom/right edge.

#include <vector>

#include "fuselite/autograd.hpp"

namespace fuselite::ops {

using ag::Var;

struct ConvGeometry {
  int channels = 0;
  int in_h = 0;
  int in_w = 0;
  int kernel = 0;
  int stride = 1;
  int pad_top = 0;
  int pad_left = 0;
  int out_h = 0;
  int out_w = 0;
};

ConvGeometry same_geometry(int channels, int in_h, int in_w, int kernel, int stride);

// weight: (out_c, in_c, k, k); bias: (1, out_c, 1, 1) or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride);

// weight: (in_c, out_c, k, k). Exact adjoint of a same-padded conv2d whose
// input is (out_c, in_h * stride, in_w * stride).
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride);

// Per-sample, per-channel normalization over H*W with affine (gamma, beta).
template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = 1e-5);

template <typename T>
Var<T> leaky_relu(const Var<T>& x, double slope = 0.2);

template <typename T>
Var<T> relu(const Var<T>& x);

template <typename T>
Var<T> sigmoid(const Var<T>& x);

// 2x2 window, stride 2; odd trailing rows/cols are dropped.
template <typename T>
Var<T> max_pool2(const Var<T>& x);

// Flattens each sample to a row vector; weight (out, in, 1, 1), bias (1, out, 1, 1).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts);

// Per-channel y = x * scale[c] + shift[c] with constant coefficients.
template <typename T>
Var<T> channel_affine(const Var<T>& x, const std::vector<T>& scale, const std::vector<T>& shift);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& a, double factor);

template <typename T>
Var<T> add_scalar(const Var<T>& a, double offset);

template <typename T>
Var<T> square(const Var<T>& a);

// Scalar (1,1,1,1) mean over every element.
template <typename T>
Var<T> mean(const Var<T>& a);

// Scalar mean of |a - b|.
template <typename T>
Var<T> l1_mean(const Var<T>& a, const Var<T>& b);

// Scalar mean of (a - target)^2 for a constant target.
template <typename T>
Var<T> mse_to_constant(const Var<T>& a, double target);

}  // namespace fuselite::ops
