#include "fuselite/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>

namespace fuselite::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

// Upper bound on the im2col scratch size, in elements.
constexpr std::size_t kColumnBudget = std::size_t{1} << 22;

int rows_per_chunk(const ConvGeometry& g, int width) {
  const std::size_t per_row =
      static_cast<std::size_t>(g.channels) * g.kernel * g.kernel * static_cast<std::size_t>(width);
  return static_cast<int>(std::clamp<std::size_t>(kColumnBudget / std::max<std::size_t>(per_row, 1),
                                                  1, static_cast<std::size_t>(g.out_h)));
}

// Valid output-column range [lo, hi) for which ox*stride + offset lies in [0, width).
inline void valid_span(int offset, int stride, int width, int out_w, int& lo, int& hi) {
  lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  const int last = width - 1 - offset;
  hi = last < 0 ? 0 : std::min(out_w, last / stride + 1);
  lo = std::min(lo, hi);
}

// Unfolds output rows [r0, r1) of one sample into col (C*k*k x (r1-r0)*out_w).
template <typename T>
void im2col_rows(const ConvGeometry& g, const T* image, int r0, int r1, T* col) {
  const int k = g.kernel;
  const std::size_t cols = static_cast<std::size_t>(r1 - r0) * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    const T* plane = image + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * cols;
        const int offset = kx - g.pad_left;
        int lo = 0;
        int hi = 0;
        valid_span(offset, g.stride, g.in_w, g.out_w, lo, hi);
        for (int oy = r0; oy < r1; ++oy) {
          T* dst = row + static_cast<std::size_t>(oy - r0) * g.out_w;
          const int iy = oy * g.stride - g.pad_top + ky;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.in_w;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo + offset, src + hi + offset, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) {
              dst[ox] = src[ox * g.stride + offset];
            }
          }
          std::fill(dst + hi, dst + g.out_w, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col_rows: scatters col back into the image, accumulating.
template <typename T>
void col2im_rows(const ConvGeometry& g, const T* col, int r0, int r1, T* image) {
  const int k = g.kernel;
  const std::size_t cols = static_cast<std::size_t>(r1 - r0) * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    T* plane = image + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * cols;
        const int offset = kx - g.pad_left;
        int lo = 0;
        int hi = 0;
        valid_span(offset, g.stride, g.in_w, g.out_w, lo, hi);
        for (int oy = r0; oy < r1; ++oy) {
          const int iy = oy * g.stride - g.pad_top + ky;
          if (iy < 0 || iy >= g.in_h) {
            continue;
          }
          const T* src = row + static_cast<std::size_t>(oy - r0) * g.out_w;
          T* dst = plane + static_cast<std::size_t>(iy) * g.in_w;
          for (int ox = lo; ox < hi; ++ox) {
            dst[ox * g.stride + offset] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void add_channel_bias(Tensor<T>& out, const Tensor<T>& bias) {
  const Shape& s = out.shape();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      T* p = out.channel(n, c);
      const T b = bias[c];
      for (std::size_t i = 0; i < s.plane(); ++i) {
        p[i] += b;
      }
    }
  }
}

template <typename T>
void accumulate_bias_grad(ag::Node<T>* bias, const Tensor<T>& grad) {
  if (!ag::wants_grad(bias)) {
    return;
  }
  Tensor<T>& gb = bias->grad_buffer();
  const Shape& s = grad.shape();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = grad.channel(n, c);
      double acc = 0.0;
      for (std::size_t i = 0; i < s.plane(); ++i) {
        acc += p[i];
      }
      gb[c] += static_cast<T>(acc);
    }
  }
}

void check(bool ok, const std::string& what) {
  require(ok, ErrorCode::ShapeMismatch, what);
}

}  // namespace

ConvGeometry same_geometry(int channels, int in_h, int in_w, int kernel, int stride) {
  ConvGeometry g;
  g.channels = channels;
  g.in_h = in_h;
  g.in_w = in_w;
  g.kernel = kernel;
  g.stride = stride;
  g.out_h = (in_h + stride - 1) / stride;
  g.out_w = (in_w + stride - 1) / stride;
  g.pad_top = std::max((g.out_h - 1) * stride + kernel - in_h, 0) / 2;
  g.pad_left = std::max((g.out_w - 1) * stride + kernel - in_w, 0) / 2;
  return g;
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  check(ws.c == xs.c && ws.h == ws.w,
        "conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
  check(!bias.defined() || bias.value().size() == static_cast<std::size_t>(ws.n),
        "conv2d: bias size");
  const ConvGeometry g = same_geometry(xs.c, xs.h, xs.w, ws.h, stride);
  const int out_c = ws.n;
  const int depth = xs.c * ws.h * ws.w;
  const int plane = g.out_h * g.out_w;
  const int chunk = rows_per_chunk(g, g.out_w);

  Tensor<T> out(Shape{xs.n, out_c, g.out_h, g.out_w});
  std::vector<T> col(static_cast<std::size_t>(depth) * chunk * g.out_w);
  ConstMatMap<T> w_mat(weight.value().data(), out_c, depth);
  for (int n = 0; n < xs.n; ++n) {
    for (int r0 = 0; r0 < g.out_h; r0 += chunk) {
      const int r1 = std::min(g.out_h, r0 + chunk);
      const int cols = (r1 - r0) * g.out_w;
      im2col_rows(g, x.value().sample(n), r0, r1, col.data());
      ConstMatMap<T> col_mat(col.data(), depth, cols);
      StridedMap<T> dst(out.sample(n) + static_cast<std::size_t>(r0) * g.out_w, out_c, cols,
                        Eigen::OuterStride<>(plane));
      dst.noalias() = w_mat * col_mat;
    }
  }
  if (bias.defined()) {
    add_channel_bias(out, bias.value());
  }

  return ag::make_result<T>(std::move(out), {x, weight, bias}, [g, out_c, depth, plane, chunk](ag::Node<T>& self) {
    ag::Node<T>* px = self.parents[0].get();
    ag::Node<T>* pw = self.parents[1].get();
    ag::Node<T>* pb = self.parents[2].get();
    const Tensor<T>& grad = self.grad;
    accumulate_bias_grad(pb, grad);
    const bool want_x = ag::wants_grad(px);
    const bool want_w = ag::wants_grad(pw);
    if (!want_x && !want_w) {
      return;
    }
    const Tensor<T>& xv = px->value;
    ConstMatMap<T> w_mat(pw->value.data(), out_c, depth);
    std::vector<T> col(static_cast<std::size_t>(depth) * chunk * g.out_w);
    RowMat<T> dcol;
    for (int n = 0; n < xv.shape().n; ++n) {
      for (int r0 = 0; r0 < g.out_h; r0 += chunk) {
        const int r1 = std::min(g.out_h, r0 + chunk);
        const int cols = (r1 - r0) * g.out_w;
        ConstStridedMap<T> g_mat(grad.sample(n) + static_cast<std::size_t>(r0) * g.out_w, out_c,
                                 cols, Eigen::OuterStride<>(plane));
        if (want_w) {
          im2col_rows(g, xv.sample(n), r0, r1, col.data());
          ConstMatMap<T> col_mat(col.data(), depth, cols);
          MatMap<T> dw(pw->grad_buffer().data(), out_c, depth);
          dw.noalias() += g_mat * col_mat.transpose();
        }
        if (want_x) {
          dcol.noalias() = w_mat.transpose() * g_mat;
          col2im_rows(g, dcol.data(), r0, r1, px->grad_buffer().sample(n));
        }
      }
    }
  });
}

template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  check(ws.n == xs.c && ws.h == ws.w,
        "conv_transpose2d: weight " + ws.str() + " incompatible with input " + xs.str());
  const int out_c = ws.c;
  check(!bias.defined() || bias.value().size() == static_cast<std::size_t>(out_c),
        "conv_transpose2d: bias size");
  // Geometry of the adjoint forward conv: big image (out_c, H*s, W*s) -> small (xs.h, xs.w).
  const ConvGeometry g = same_geometry(out_c, xs.h * stride, xs.w * stride, ws.h, stride);
  check(g.out_h == xs.h && g.out_w == xs.w, "conv_transpose2d: geometry");
  const int depth = out_c * ws.h * ws.w;
  const int in_c = xs.c;
  const int small_plane = xs.h * xs.w;
  const int chunk = rows_per_chunk(g, g.out_w);

  Tensor<T> out(Shape{xs.n, out_c, g.in_h, g.in_w});
  ConstMatMap<T> w_mat(weight.value().data(), in_c, depth);
  RowMat<T> col;
  for (int n = 0; n < xs.n; ++n) {
    for (int r0 = 0; r0 < g.out_h; r0 += chunk) {
      const int r1 = std::min(g.out_h, r0 + chunk);
      const int cols = (r1 - r0) * g.out_w;
      ConstStridedMap<T> x_mat(x.value().sample(n) + static_cast<std::size_t>(r0) * g.out_w, in_c,
                               cols, Eigen::OuterStride<>(small_plane));
      col.noalias() = w_mat.transpose() * x_mat;
      col2im_rows(g, col.data(), r0, r1, out.sample(n));
    }
  }
  if (bias.defined()) {
    add_channel_bias(out, bias.value());
  }

  return ag::make_result<T>(std::move(out), {x, weight, bias}, [g, in_c, depth, small_plane, chunk](ag::Node<T>& self) {
    ag::Node<T>* px = self.parents[0].get();
    ag::Node<T>* pw = self.parents[1].get();
    ag::Node<T>* pb = self.parents[2].get();
    const Tensor<T>& grad = self.grad;
    accumulate_bias_grad(pb, grad);
    const bool want_x = ag::wants_grad(px);
    const bool want_w = ag::wants_grad(pw);
    if (!want_x && !want_w) {
      return;
    }
    const Tensor<T>& xv = px->value;
    ConstMatMap<T> w_mat(pw->value.data(), in_c, depth);
    std::vector<T> dcol(static_cast<std::size_t>(depth) * chunk * g.out_w);
    for (int n = 0; n < xv.shape().n; ++n) {
      for (int r0 = 0; r0 < g.out_h; r0 += chunk) {
        const int r1 = std::min(g.out_h, r0 + chunk);
        const int cols = (r1 - r0) * g.out_w;
        im2col_rows(g, grad.sample(n), r0, r1, dcol.data());
        ConstMatMap<T> dcol_mat(dcol.data(), depth, cols);
        if (want_x) {
          StridedMap<T> dx(px->grad_buffer().sample(n) + static_cast<std::size_t>(r0) * g.out_w,
                           in_c, cols, Eigen::OuterStride<>(small_plane));
          dx.noalias() += w_mat * dcol_mat;
        }
        if (want_w) {
          ConstStridedMap<T> x_mat(xv.sample(n) + static_cast<std::size_t>(r0) * g.out_w, in_c,
                                   cols, Eigen::OuterStride<>(small_plane));
          MatMap<T> dw(pw->grad_buffer().data(), in_c, depth);
          dw.noalias() += x_mat * dcol_mat.transpose();
        }
      }
    }
  });
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps) {
  const Shape s = x.shape();
  check(gamma.value().size() == static_cast<std::size_t>(s.c) &&
            beta.value().size() == static_cast<std::size_t>(s.c),
        "instance_norm: affine size");
  const std::size_t plane = s.plane();
  std::vector<double> means(static_cast<std::size_t>(s.n) * s.c);
  std::vector<double> inv_std(means.size());
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* src = x.value().channel(n, c);
      double sum = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        sum += src[i];
      }
      const double mu = sum / static_cast<double>(plane);
      double var = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = src[i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(plane);
      const double is = 1.0 / std::sqrt(var + eps);
      const std::size_t idx = static_cast<std::size_t>(n) * s.c + c;
      means[idx] = mu;
      inv_std[idx] = is;
      const double a = gamma.value()[c] * is;
      const double b = beta.value()[c] - a * mu;
      T* dst = out.channel(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        dst[i] = static_cast<T>(a * src[i] + b);
      }
    }
  }
  return ag::make_result<T>(std::move(out), {x, gamma, beta},
                            [means = std::move(means), inv_std = std::move(inv_std)](ag::Node<T>& self) {
    ag::Node<T>* px = self.parents[0].get();
    ag::Node<T>* pg = self.parents[1].get();
    ag::Node<T>* pb = self.parents[2].get();
    const Shape& s = self.value.shape();
    const std::size_t plane = s.plane();
    const double count = static_cast<double>(plane);
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const std::size_t idx = static_cast<std::size_t>(n) * s.c + c;
        const double mu = means[idx];
        const double is = inv_std[idx];
        const T* xin = px->value.channel(n, c);
        const T* dy = self.grad.channel(n, c);
        double sum_dy = 0.0;
        double sum_dy_xhat = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          const double xhat = (xin[i] - mu) * is;
          sum_dy += dy[i];
          sum_dy_xhat += dy[i] * xhat;
        }
        if (ag::wants_grad(pg)) {
          pg->grad_buffer()[c] += static_cast<T>(sum_dy_xhat);
        }
        if (ag::wants_grad(pb)) {
          pb->grad_buffer()[c] += static_cast<T>(sum_dy);
        }
        if (ag::wants_grad(px)) {
          const double k = pg->value[c] * is / count;
          T* dx = px->grad_buffer().channel(n, c);
          for (std::size_t i = 0; i < plane; ++i) {
            const double xhat = (xin[i] - mu) * is;
            dx[i] += static_cast<T>(k * (count * dy[i] - sum_dy - xhat * sum_dy_xhat));
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, double slope) {
  const T a = static_cast<T>(slope);
  Tensor<T> out(x.shape());
  const T* src = x.value().data();
  T* dst = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    dst[i] = src[i] > T(0) ? src[i] : a * src[i];
  }
  return ag::make_result<T>(std::move(out), {x}, [a](ag::Node<T>& self) {
    ag::Node<T>* px = self.parents[0].get();
    const T* xin = px->value.data();
    const T* dy = self.grad.data();
    T* dx = px->grad_buffer().data();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      dx[i] += xin[i] > T(0) ? dy[i] : a * dy[i];
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return leaky_relu(x, 0.0);
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const T* src = x.value().data();
  T* dst = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    dst[i] = T(1) / (T(1) + std::exp(-src[i]));
  }
  return ag::make_result<T>(std::move(out), {x}, [](ag::Node<T>& self) {
    ag::Node<T>* px = self.parents[0].get();
    const T* y = self.value.data();
    const T* dy = self.grad.data();
    T* dx = px->grad_buffer().data();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      dx[i] += dy[i] * y[i] * (T(1) - y[i]);
    }
  });
}

template <typename T>
Var<T> max_pool2(const Var<T>& x) {
  const Shape s = x.shape();
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  check(os.h > 0 && os.w > 0, "max_pool2: input too small " + s.str());
  Tensor<T> out(os);
  std::vector<std::uint32_t> arg(out.size());
  std::size_t o = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* src = x.value().channel(n, c);
      for (int y = 0; y < os.h; ++y) {
        for (int xo = 0; xo < os.w; ++xo, ++o) {
          const std::uint32_t base = static_cast<std::uint32_t>((2 * y) * s.w + 2 * xo);
          const std::uint32_t cand[4] = {base, base + 1, base + static_cast<std::uint32_t>(s.w),
                                         base + static_cast<std::uint32_t>(s.w) + 1};
          std::uint32_t best = cand[0];
          for (int k = 1; k < 4; ++k) {
            if (src[cand[k]] > src[best]) {
              best = cand[k];
            }
          }
          out[o] = src[best];
          arg[o] = best;
        }
      }
    }
  }
  return ag::make_result<T>(std::move(out), {x}, [arg = std::move(arg)](ag::Node<T>& self) {
    ag::Node<T>* px = self.parents[0].get();
    const Shape& os = self.value.shape();
    Tensor<T>& gx = px->grad_buffer();
    std::size_t o = 0;
    for (int n = 0; n < os.n; ++n) {
      for (int c = 0; c < os.c; ++c) {
        T* dst = gx.channel(n, c);
        for (std::size_t i = 0; i < os.plane(); ++i, ++o) {
          dst[arg[o]] += self.grad[o];
        }
      }
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  const int in = static_cast<int>(xs.per_sample());
  check(static_cast<std::size_t>(ws.c) * ws.h * ws.w == static_cast<std::size_t>(in),
        "linear: weight " + ws.str() + " incompatible with input " + xs.str());
  const int out_f = ws.n;
  Tensor<T> out(Shape{xs.n, out_f, 1, 1});
  ConstMatMap<T> x_mat(x.value().data(), xs.n, in);
  ConstMatMap<T> w_mat(weight.value().data(), out_f, in);
  MatMap<T> y(out.data(), xs.n, out_f);
  y.noalias() = x_mat * w_mat.transpose();
  if (bias.defined()) {
    for (int n = 0; n < xs.n; ++n) {
      for (int j = 0; j < out_f; ++j) {
        y(n, j) += bias.value()[j];
      }
    }
  }
  return ag::make_result<T>(std::move(out), {x, weight, bias}, [in, out_f](ag::Node<T>& self) {
    ag::Node<T>* px = self.parents[0].get();
    ag::Node<T>* pw = self.parents[1].get();
    ag::Node<T>* pb = self.parents[2].get();
    const int batch = self.value.shape().n;
    ConstMatMap<T> dy(self.grad.data(), batch, out_f);
    if (ag::wants_grad(px)) {
      MatMap<T> dx(px->grad_buffer().data(), batch, in);
      ConstMatMap<T> w_mat(pw->value.data(), out_f, in);
      dx.noalias() += dy * w_mat;
    }
    if (ag::wants_grad(pw)) {
      MatMap<T> dw(pw->grad_buffer().data(), out_f, in);
      ConstMatMap<T> x_mat(px->value.data(), batch, in);
      dw.noalias() += dy.transpose() * x_mat;
    }
    if (ag::wants_grad(pb)) {
      Tensor<T>& gb = pb->grad_buffer();
      for (int n = 0; n < batch; ++n) {
        for (int j = 0; j < out_f; ++j) {
          gb[j] += dy(n, j);
        }
      }
    }
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  check(!parts.empty(), "concat_channels: no inputs");
  const Shape first = parts.front().shape();
  int total_c = 0;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    check(s.n == first.n && s.h == first.h && s.w == first.w,
          "concat_channels: " + s.str() + " vs " + first.str());
    total_c += s.c;
  }
  Tensor<T> out(Shape{first.n, total_c, first.h, first.w});
  for (int n = 0; n < first.n; ++n) {
    T* dst = out.sample(n);
    for (const auto& p : parts) {
      const std::size_t count = p.shape().per_sample();
      std::copy(p.value().sample(n), p.value().sample(n) + count, dst);
      dst += count;
    }
  }
  return ag::make_result<T>(std::move(out), parts, [](ag::Node<T>& self) {
    const int batch = self.value.shape().n;
    for (int n = 0; n < batch; ++n) {
      const T* src = self.grad.sample(n);
      for (auto& parent : self.parents) {
        const std::size_t count = parent->value.shape().per_sample();
        if (parent->requires_grad) {
          T* dst = parent->grad_buffer().sample(n);
          for (std::size_t i = 0; i < count; ++i) {
            dst[i] += src[i];
          }
        }
        src += count;
      }
    }
  });
}

template <typename T>
Var<T> channel_affine(const Var<T>& x, const std::vector<T>& scale_c, const std::vector<T>& shift_c) {
  const Shape s = x.shape();
  check(scale_c.size() == static_cast<std::size_t>(s.c) && shift_c.size() == scale_c.size(),
        "channel_affine: coefficient count");
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* src = x.value().channel(n, c);
      T* dst = out.channel(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        dst[i] = src[i] * scale_c[c] + shift_c[c];
      }
    }
  }
  return ag::make_result<T>(std::move(out), {x}, [scale_c](ag::Node<T>& self) {
    ag::Node<T>* px = self.parents[0].get();
    const Shape& s = self.value.shape();
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const T* dy = self.grad.channel(n, c);
        T* dx = px->grad_buffer().channel(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) {
          dx[i] += dy[i] * scale_c[c];
        }
      }
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check(a.shape() == b.shape(), "mul: " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.value()[i] * b.value()[i];
  }
  return ag::make_result<T>(std::move(out), {a, b}, [](ag::Node<T>& self) {
    ag::Node<T>* pa = self.parents[0].get();
    ag::Node<T>* pb = self.parents[1].get();
    const std::size_t n = self.value.size();
    if (ag::wants_grad(pa)) {
      T* da = pa->grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) {
        da[i] += self.grad[i] * pb->value[i];
      }
    }
    if (ag::wants_grad(pb)) {
      T* db = pb->grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) {
        db[i] += self.grad[i] * pa->value[i];
      }
    }
  });
}

namespace {
template <typename T>
Var<T> add_scaled(const Var<T>& a, const Var<T>& b, T sign) {
  check(a.shape() == b.shape(), "add/sub: " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.value()[i] + sign * b.value()[i];
  }
  return ag::make_result<T>(std::move(out), {a, b}, [sign](ag::Node<T>& self) {
    ag::Node<T>* pa = self.parents[0].get();
    ag::Node<T>* pb = self.parents[1].get();
    const std::size_t n = self.value.size();
    if (ag::wants_grad(pa)) {
      T* da = pa->grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) {
        da[i] += self.grad[i];
      }
    }
    if (ag::wants_grad(pb)) {
      T* db = pb->grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) {
        db[i] += sign * self.grad[i];
      }
    }
  });
}
}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return add_scaled(a, b, T(1));
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return add_scaled(a, b, T(-1));
}

template <typename T>
Var<T> scale(const Var<T>& a, double factor) {
  const T f = static_cast<T>(factor);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.value()[i] * f;
  }
  return ag::make_result<T>(std::move(out), {a}, [f](ag::Node<T>& self) {
    T* da = self.parents[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      da[i] += self.grad[i] * f;
    }
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, double offset) {
  const T o = static_cast<T>(offset);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.value()[i] + o;
  }
  return ag::make_result<T>(std::move(out), {a}, [](ag::Node<T>& self) {
    ag::accumulate(self.parents[0].get(), self.grad);
  });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.value()[i] * a.value()[i];
  }
  return ag::make_result<T>(std::move(out), {a}, [](ag::Node<T>& self) {
    ag::Node<T>* pa = self.parents[0].get();
    T* da = pa->grad_buffer().data();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      da[i] += T(2) * pa->value[i] * self.grad[i];
    }
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const std::size_t n = a.value().size();
  check(n > 0, "mean: empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += a.value()[i];
  }
  Tensor<T> out(Shape{1, 1, 1, 1}, static_cast<T>(acc / static_cast<double>(n)));
  return ag::make_result<T>(std::move(out), {a}, [n](ag::Node<T>& self) {
    const T g = static_cast<T>(self.grad[0] / static_cast<double>(n));
    T* da = self.parents[0]->grad_buffer().data();
    for (std::size_t i = 0; i < n; ++i) {
      da[i] += g;
    }
  });
}

template <typename T>
Var<T> l1_mean(const Var<T>& a, const Var<T>& b) {
  check(a.shape() == b.shape(), "l1_mean: " + a.shape().str() + " vs " + b.shape().str());
  const std::size_t n = a.value().size();
  check(n > 0, "l1_mean: empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += std::abs(static_cast<double>(a.value()[i]) - static_cast<double>(b.value()[i]));
  }
  Tensor<T> out(Shape{1, 1, 1, 1}, static_cast<T>(acc / static_cast<double>(n)));
  return ag::make_result<T>(std::move(out), {a, b}, [n](ag::Node<T>& self) {
    ag::Node<T>* pa = self.parents[0].get();
    ag::Node<T>* pb = self.parents[1].get();
    const T g = static_cast<T>(self.grad[0] / static_cast<double>(n));
    const auto sign = [](T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); };
    if (ag::wants_grad(pa)) {
      T* da = pa->grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) {
        da[i] += g * sign(pa->value[i] - pb->value[i]);
      }
    }
    if (ag::wants_grad(pb)) {
      T* db = pb->grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) {
        db[i] -= g * sign(pa->value[i] - pb->value[i]);
      }
    }
  });
}

template <typename T>
Var<T> mse_to_constant(const Var<T>& a, double target) {
  const std::size_t n = a.value().size();
  check(n > 0, "mse_to_constant: empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.value()[i]) - target;
    acc += d * d;
  }
  Tensor<T> out(Shape{1, 1, 1, 1}, static_cast<T>(acc / static_cast<double>(n)));
  return ag::make_result<T>(std::move(out), {a}, [n, target](ag::Node<T>& self) {
    ag::Node<T>* pa = self.parents[0].get();
    const double g = 2.0 * self.grad[0] / static_cast<double>(n);
    T* da = pa->grad_buffer().data();
    for (std::size_t i = 0; i < n; ++i) {
      da[i] += static_cast<T>(g * (static_cast<double>(pa->value[i]) - target));
    }
  });
}

#define FUSELITE_INSTANTIATE_OPS(T)                                                        \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int);                \
  template Var<T> conv_transpose2d(const Var<T>&, const Var<T>&, const Var<T>&, int);      \
  template Var<T> instance_norm(const Var<T>&, const Var<T>&, const Var<T>&, double);      \
  template Var<T> leaky_relu(const Var<T>&, double);                                       \
  template Var<T> relu(const Var<T>&);                                                     \
  template Var<T> sigmoid(const Var<T>&);                                                  \
  template Var<T> max_pool2(const Var<T>&);                                                \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                     \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                             \
  template Var<T> channel_affine(const Var<T>&, const std::vector<T>&, const std::vector<T>&); \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                       \
  template Var<T> add(const Var<T>&, const Var<T>&);                                       \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                       \
  template Var<T> scale(const Var<T>&, double);                                            \
  template Var<T> add_scalar(const Var<T>&, double);                                       \
  template Var<T> square(const Var<T>&);                                                   \
  template Var<T> mean(const Var<T>&);                                                     \
  template Var<T> l1_mean(const Var<T>&, const Var<T>&);                                   \
  template Var<T> mse_to_constant(const Var<T>&, double);

FUSELITE_INSTANTIATE_OPS(float)
FUSELITE_INSTANTIATE_OPS(double)

#undef FUSELITE_INSTANTIATE_OPS

}  // namespace fuselite::ops
