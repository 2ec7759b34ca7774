#include "fuselite/nets.hpp"

#include <cmath>
#include <cstring>

#include "fuselite/ops.hpp"

namespace fuselite {

using ag::Var;

std::string_view kind_name(NetworkKind kind) {
  switch (kind) {
    case NetworkKind::homography:
      return "homography";
    case NetworkKind::attention:
      return "attention";
    case NetworkKind::merge:
      return "merge";
    case NetworkKind::discriminator:
      return "discriminator";
    case NetworkKind::feature_extractor:
      return "feature_extractor";
  }
  return "unknown";
}

NetworkKind parse_kind(std::string_view name) {
  for (NetworkKind k : {NetworkKind::homography, NetworkKind::attention, NetworkKind::merge,
                        NetworkKind::discriminator, NetworkKind::feature_extractor}) {
    if (kind_name(k) == name) {
      return k;
    }
  }
  fail(ErrorCode::InvalidArgument, "unknown network kind '" + std::string(name) + "'");
}

ArchSpec default_arch(NetworkKind kind) {
  ArchSpec a;
  a.kind = kind;
  return a;
}

namespace {

constexpr int kHomographyFilters[12] = {64, 64, 64, 64, 128, 128, 128, 128, 256, 256, 256, 256};
constexpr int kHomographyInputChannels = 8;
constexpr int kHomographyHidden = 1024;

// VGG-19 convolutions up to conv5_2: (name, width multiple of the base).
struct VggLayer {
  const char* name;
  int multiple;
  bool pool_after;
  bool tap;
};
constexpr VggLayer kVgg[] = {
    {"conv1_1", 1, false, false}, {"conv1_2", 1, true, true},   {"conv2_1", 2, false, false},
    {"conv2_2", 2, true, true},   {"conv3_1", 4, false, false}, {"conv3_2", 4, false, true},
    {"conv3_3", 4, false, false}, {"conv3_4", 4, true, false},  {"conv4_1", 8, false, false},
    {"conv4_2", 8, false, true},  {"conv4_3", 8, false, false}, {"conv4_4", 8, true, false},
    {"conv5_1", 8, false, false}, {"conv5_2", 8, false, true},
};

void add_conv(std::vector<ParamShape>& out, const std::string& name, int out_c, int in_c, int k,
              bool bias, bool trainable = true) {
  out.push_back({name + ".weight", Shape{out_c, in_c, k, k}, trainable, ParamInit::he_normal, in_c * k * k});
  if (bias) {
    out.push_back({name + ".bias", Shape{1, out_c, 1, 1}, trainable, ParamInit::zeros, 0});
  }
}

void add_deconv(std::vector<ParamShape>& out, const std::string& name, int in_c, int out_c, int k, int stride) {
  // Each output pixel sees in_c * (k / stride)^2 inputs.
  out.push_back({name + ".weight", Shape{in_c, out_c, k, k}, true, ParamInit::he_normal,
                 in_c * k * k / (stride * stride)});
}

void add_norm(std::vector<ParamShape>& out, const std::string& name, int c) {
  out.push_back({name + ".gamma", Shape{1, c, 1, 1}, true, ParamInit::ones, 0});
  out.push_back({name + ".beta", Shape{1, c, 1, 1}, true, ParamInit::zeros, 0});
}

void add_dense(std::vector<ParamShape>& out, const std::string& name, int out_f, int in_f) {
  out.push_back({name + ".weight", Shape{out_f, in_f, 1, 1}, true, ParamInit::he_normal, in_f});
  out.push_back({name + ".bias", Shape{1, out_f, 1, 1}, true, ParamInit::zeros, 0});
}

}  // namespace

std::vector<ParamShape> expected_shapes(const ArchSpec& arch) {
  std::vector<ParamShape> out;
  switch (arch.kind) {
    case NetworkKind::homography: {
      require(arch.input_size >= 64 && arch.input_size % 64 == 0, ErrorCode::InvalidArgument,
              "homography input size must be a positive multiple of 64");
      int in_c = kHomographyInputChannels;
      for (int i = 0; i < 12; ++i) {
        const std::string name = "conv" + std::to_string(i + 1);
        add_conv(out, name, kHomographyFilters[i], in_c, 3, false);
        add_norm(out, name + ".norm", kHomographyFilters[i]);
        in_c = kHomographyFilters[i];
      }
      const int side = arch.input_size / 64;
      add_dense(out, "fc1", kHomographyHidden, 256 * side * side);
      add_dense(out, "fc2", 8, kHomographyHidden);
      break;
    }
    case NetworkKind::attention: {
      const int w = arch.width;
      add_conv(out, "encoder", w, 3, 3, true);
      add_conv(out, "attend1", w, 2 * w, 3, true);
      add_conv(out, "attend2", w, w, 3, true);
      break;
    }
    case NetworkKind::merge: {
      const int w = arch.width;
      require(arch.depth >= 1, ErrorCode::InvalidArgument, "merge depth must be >= 1");
      for (int i = 1; i <= arch.depth; ++i) {
        const std::string name = "down" + std::to_string(i);
        const bool innermost = i == arch.depth;
        add_conv(out, name, w, i == 1 ? 2 * w : w, 4, innermost);
        if (!innermost) {
          add_norm(out, name + ".norm", w);
        }
      }
      for (int i = arch.depth; i >= 1; --i) {
        const std::string name = "up" + std::to_string(i);
        add_deconv(out, name, i == arch.depth ? w : 2 * w, w, 4, 2);
        add_norm(out, name + ".norm", w);
      }
      add_conv(out, "out", 3, w, 3, true);
      break;
    }
    case NetworkKind::discriminator: {
      const int b = arch.width;
      add_conv(out, "conv1", b, 9, 4, true);
      add_conv(out, "conv2", 2 * b, b, 4, false);
      add_norm(out, "conv2.norm", 2 * b);
      add_conv(out, "conv3", 4 * b, 2 * b, 4, false);
      add_norm(out, "conv3.norm", 4 * b);
      add_conv(out, "conv4", 8 * b, 4 * b, 4, false);
      add_norm(out, "conv4.norm", 8 * b);
      add_conv(out, "conv5", 1, 8 * b, 4, true);
      break;
    }
    case NetworkKind::feature_extractor: {
      int in_c = 3;
      for (const auto& layer : kVgg) {
        const int c = arch.width * layer.multiple;
        add_conv(out, layer.name, c, in_c, 3, true, false);
        in_c = c;
      }
      break;
    }
  }
  return out;
}

template <typename T>
void NetworkParams<T>::add(std::string name, Tensor<T> value, bool trainable) {
  require(!contains(name), ErrorCode::InvalidArgument, "duplicate parameter " + name);
  entries_.push_back({std::move(name), Var<T>::leaf(std::move(value), trainable), trainable});
}

template <typename T>
bool NetworkParams<T>::contains(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) {
      return true;
    }
  }
  return false;
}

template <typename T>
const Var<T>& NetworkParams<T>::get(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) {
      return e.var;
    }
  }
  fail(ErrorCode::InvalidArgument,
       "no parameter '" + std::string(name) + "' in " + std::string(kind_name(arch_.kind)));
}

template <typename T>
Var<T>& NetworkParams<T>::get(std::string_view name) {
  return const_cast<Var<T>&>(std::as_const(*this).get(name));
}

template <typename T>
std::vector<Var<T>> NetworkParams<T>::trainable_vars() const {
  std::vector<Var<T>> out;
  for (const auto& e : entries_) {
    if (e.trainable) {
      out.push_back(e.var);
    }
  }
  return out;
}

template <typename T>
std::size_t NetworkParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    n += e.var.value().size();
  }
  return n;
}

template <typename T>
void NetworkParams<T>::set_frozen(bool frozen) {
  for (auto& e : entries_) {
    if (e.trainable) {
      e.var.set_requires_grad(!frozen);
    }
  }
}

template <typename T>
NetworkParams<T> NetworkParams<T>::clone() const {
  NetworkParams out(arch_);
  for (const auto& e : entries_) {
    out.add(e.name, e.var.value(), e.trainable);
  }
  return out;
}

template <typename T>
std::uint64_t NetworkParams<T>::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& e : entries_) {
    mix(e.name.data(), e.name.size());
    mix(e.var.value().data(), e.var.value().size() * sizeof(T));
  }
  return h;
}

template <typename T>
NetworkParams<T> init_params(const ArchSpec& arch, std::mt19937_64& rng) {
  NetworkParams<T> params(arch);
  for (const auto& ps : expected_shapes(arch)) {
    Tensor<T> value(ps.shape);
    switch (ps.init) {
      case ParamInit::he_normal: {
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / ps.fan_in));
        for (auto& v : value.values()) {
          v = static_cast<T>(normal(rng));
        }
        break;
      }
      case ParamInit::ones:
        value.fill(T(1));
        break;
      case ParamInit::zeros:
        break;
    }
    params.add(ps.name, std::move(value), ps.trainable);
  }
  return params;
}

namespace {

template <typename T>
Var<T> none() {
  return Var<T>();
}

template <typename T>
Var<T> conv_norm(const NetworkParams<T>& p, const std::string& name, const Var<T>& x, int stride) {
  const Var<T> y = ops::conv2d(x, p.get(name + ".weight"), none<T>(), stride);
  return ops::instance_norm(y, p.get(name + ".norm.gamma"), p.get(name + ".norm.beta"), kNormEps);
}

template <typename T>
Var<T> conv_bias(const NetworkParams<T>& p, const std::string& name, const Var<T>& x, int stride) {
  return ops::conv2d(x, p.get(name + ".weight"), p.get(name + ".bias"), stride);
}

void require_kind(NetworkKind actual, NetworkKind expected) {
  require(actual == expected, ErrorCode::InvalidArgument,
          "expected " + std::string(kind_name(expected)) + " parameters, got " +
              std::string(kind_name(actual)));
}

}  // namespace

template <typename T>
Var<T> homography_net(const NetworkParams<T>& p, const Var<T>& input) {
  require_kind(p.kind(), NetworkKind::homography);
  const Shape s = input.shape();
  const int side = p.arch().input_size;
  require(s.c == kHomographyInputChannels && s.h == side && s.w == side, ErrorCode::ShapeMismatch,
          "homography net expects (N, 8, " + std::to_string(side) + ", " + std::to_string(side) +
              "), got " + s.str());
  Var<T> x = input;
  for (int i = 1; i <= 12; ++i) {
    x = ops::leaky_relu(conv_norm(p, "conv" + std::to_string(i), x, 1), kLeakySlope);
    if (i % 2 == 0) {
      x = ops::max_pool2(x);
    }
  }
  x = ops::leaky_relu(ops::linear(x, p.get("fc1.weight"), p.get("fc1.bias")), kLeakySlope);
  return ops::linear(x, p.get("fc2.weight"), p.get("fc2.bias"));
}

template <typename T>
AttentionOutput<T> attention_net(const NetworkParams<T>& p, const Var<T>& i1, const Var<T>& i2w,
                                 AttentionMode mode) {
  require_kind(p.kind(), NetworkKind::attention);
  require(i1.shape() == i2w.shape() && i1.shape().c == 3, ErrorCode::ShapeMismatch,
          "attention inputs must be matching 3-channel images: " + i1.shape().str() + " vs " +
              i2w.shape().str());
  AttentionOutput<T> out;
  out.f1 = ops::leaky_relu(conv_bias(p, "encoder", i1, 1), kLeakySlope);
  out.f2 = ops::leaky_relu(conv_bias(p, "encoder", i2w, 1), kLeakySlope);
  switch (mode) {
    case AttentionMode::learned: {
      const Var<T> joint = ops::concat_channels<T>({out.f1, out.f2});
      const Var<T> hidden = ops::leaky_relu(conv_bias(p, "attend1", joint, 1), kLeakySlope);
      out.a2 = ops::sigmoid(conv_bias(p, "attend2", hidden, 1));
      break;
    }
    case AttentionMode::ones:
      out.a2 = Var<T>::constant(Tensor<T>(out.f2.shape(), T(1)));
      break;
    case AttentionMode::zeros:
      out.a2 = Var<T>::constant(Tensor<T>(out.f2.shape(), T(0)));
      break;
  }
  out.f2p = ops::mul(out.a2, out.f2);
  return out;
}

template <typename T>
Var<T> merge_net(const NetworkParams<T>& p, const Var<T>& f1, const Var<T>& f2p) {
  require_kind(p.kind(), NetworkKind::merge);
  const int depth = p.arch().depth;
  const int width = p.arch().width;
  const Shape s = f1.shape();
  const int unit = 1 << depth;
  require(f2p.shape() == s && s.c == width, ErrorCode::ShapeMismatch,
          "merge inputs must be two " + std::to_string(width) + "-channel maps of equal size: " + s.str() +
              " vs " + f2p.shape().str());
  require(s.h % unit == 0 && s.w % unit == 0, ErrorCode::ShapeMismatch,
          "merge input " + std::to_string(s.w) + "x" + std::to_string(s.h) + " not divisible by " +
              std::to_string(unit));

  std::vector<Var<T>> skips;
  Var<T> x = ops::concat_channels<T>({f1, f2p});
  for (int i = 1; i <= depth; ++i) {
    const std::string name = "down" + std::to_string(i);
    if (i == depth) {
      x = ops::leaky_relu(conv_bias(p, name, x, 2), kLeakySlope);
    } else {
      x = ops::leaky_relu(conv_norm(p, name, x, 2), kLeakySlope);
      skips.push_back(x);
    }
  }
  for (int i = depth; i >= 1; --i) {
    const std::string name = "up" + std::to_string(i);
    if (i < depth) {
      x = ops::concat_channels<T>({x, skips[static_cast<std::size_t>(i - 1)]});
    }
    x = ops::conv_transpose2d(x, p.get(name + ".weight"), none<T>(), 2);
    x = ops::relu(ops::instance_norm(x, p.get(name + ".norm.gamma"), p.get(name + ".norm.beta"), kNormEps));
  }
  return ops::sigmoid(conv_bias(p, "out", x, 1));
}

template <typename T>
Var<T> discriminator_net(const NetworkParams<T>& p, const Var<T>& i1, const Var<T>& i2w, const Var<T>& x) {
  require_kind(p.kind(), NetworkKind::discriminator);
  require(i1.shape() == i2w.shape() && i1.shape() == x.shape() && i1.shape().c == 3,
          ErrorCode::ShapeMismatch, "discriminator inputs must be three matching 3-channel images");
  Var<T> h = ops::concat_channels<T>({i1, i2w, x});
  h = ops::leaky_relu(conv_bias(p, "conv1", h, 2), kLeakySlope);
  h = ops::leaky_relu(conv_norm(p, "conv2", h, 2), kLeakySlope);
  h = ops::leaky_relu(conv_norm(p, "conv3", h, 2), kLeakySlope);
  h = ops::leaky_relu(conv_norm(p, "conv4", h, 2), kLeakySlope);
  return conv_bias(p, "conv5", h, 1);
}

template <typename T>
std::vector<Var<T>> feature_taps(const NetworkParams<T>& phi, const Var<T>& image) {
  require_kind(phi.kind(), NetworkKind::feature_extractor);
  require(image.shape().c == 3, ErrorCode::ShapeMismatch, "feature extractor expects 3 channels");
  std::vector<Var<T>> taps{image};
  Var<T> x = image;
  if (phi.arch().pretrained) {
    // Classification weights expect 0-255 RGB minus the training-set mean.
    x = ops::channel_affine(x, std::vector<T>(3, T(255)),
                            std::vector<T>{T(-123.68), T(-116.779), T(-103.939)});
  }
  for (const auto& layer : kVgg) {
    x = ops::relu(conv_bias(phi, layer.name, x, 1));
    if (layer.tap) {
      taps.push_back(x);
    }
    if (layer.pool_after) {
      x = ops::max_pool2(x);
    }
  }
  return taps;
}

template <typename T>
Tensor<T> homography_input(const ImageBuffer& under, const ImageBuffer& over, const Bitmap& mtb_under,
                           const Bitmap& mtb_over) {
  require(under.size() == over.size() && mtb_under.width == under.width() &&
              mtb_under.height == under.height() && mtb_over.width == under.width() &&
              mtb_over.height == under.height(),
          ErrorCode::ShapeMismatch, "homography inputs differ in size");
  const int w = under.width();
  const int h = under.height();
  Tensor<T> out(Shape{1, kHomographyInputChannels, h, w});
  const Tensor<T> a = to_tensor<T>(under);
  const Tensor<T> b = to_tensor<T>(over);
  const Tensor<T> ma = to_tensor<T>(mtb_under);
  const Tensor<T> mb = to_tensor<T>(mtb_over);
  T* dst = out.data();
  for (const Tensor<T>* part : {&a, &b, &ma, &mb}) {
    std::copy(part->data(), part->data() + part->size(), dst);
    dst += part->size();
  }
  return out;
}

template <typename T>
CornerOffsets homography_forward(const NetworkParams<T>& p, const ImageBuffer& i1, const ImageBuffer& i2,
                                 const Bitmap& mtb1, const Bitmap& mtb2) {
  ag::NoGradGuard guard;
  const Var<T> out = homography_net(p, Var<T>::constant(homography_input<T>(i1, i2, mtb1, mtb2)));
  std::array<double, 8> flat{};
  for (int i = 0; i < 8; ++i) {
    flat[static_cast<std::size_t>(i)] = static_cast<double>(out.value()[static_cast<std::size_t>(i)]);
  }
  return CornerOffsets::from_flat(flat, i1.size());
}

template <typename T>
AttentionOutput<T> attention_forward(const NetworkParams<T>& p, const ImageBuffer& i1, const ImageBuffer& i2w,
                                     AttentionMode mode) {
  require(i1.size() == i2w.size(), ErrorCode::ShapeMismatch, "attention inputs differ in size");
  return attention_net(p, Var<T>::constant(to_tensor<T>(i1)), Var<T>::constant(to_tensor<T>(i2w)), mode);
}

template <typename T>
ImageBuffer merge_forward(const NetworkParams<T>& p, const Var<T>& f1, const Var<T>& f2p) {
  ag::NoGradGuard guard;
  return from_tensor(merge_net(p, f1, f2p).value());
}

template <typename T>
Tensor<T> discriminator_forward(const NetworkParams<T>& p, const ImageBuffer& i1, const ImageBuffer& i2w,
                                const ImageBuffer& x) {
  require(i1.size() == i2w.size() && i1.size() == x.size(), ErrorCode::ShapeMismatch,
          "discriminator inputs differ in size");
  ag::NoGradGuard guard;
  return discriminator_net(p, Var<T>::constant(to_tensor<T>(i1)), Var<T>::constant(to_tensor<T>(i2w)),
                           Var<T>::constant(to_tensor<T>(x)))
      .value();
}

template <typename T>
std::vector<Tensor<T>> feature_extract(const NetworkParams<T>& phi, const ImageBuffer& image) {
  ag::NoGradGuard guard;
  std::vector<Tensor<T>> out;
  for (const auto& tap : feature_taps(phi, Var<T>::constant(to_tensor<T>(image)))) {
    out.push_back(tap.value());
  }
  return out;
}

#define FUSELITE_INSTANTIATE_NETS(T)                                                                       \
  template class NetworkParams<T>;                                                                         \
  template NetworkParams<T> init_params<T>(const ArchSpec&, std::mt19937_64&);                             \
  template Var<T> homography_net(const NetworkParams<T>&, const Var<T>&);                                  \
  template AttentionOutput<T> attention_net(const NetworkParams<T>&, const Var<T>&, const Var<T>&,         \
                                            AttentionMode);                                                \
  template Var<T> merge_net(const NetworkParams<T>&, const Var<T>&, const Var<T>&);                        \
  template Var<T> discriminator_net(const NetworkParams<T>&, const Var<T>&, const Var<T>&, const Var<T>&); \
  template std::vector<Var<T>> feature_taps(const NetworkParams<T>&, const Var<T>&);                       \
  template Tensor<T> homography_input<T>(const ImageBuffer&, const ImageBuffer&, const Bitmap&,            \
                                         const Bitmap&);                                                   \
  template CornerOffsets homography_forward(const NetworkParams<T>&, const ImageBuffer&,                   \
                                            const ImageBuffer&, const Bitmap&, const Bitmap&);             \
  template AttentionOutput<T> attention_forward(const NetworkParams<T>&, const ImageBuffer&,               \
                                                const ImageBuffer&, AttentionMode);                        \
  template ImageBuffer merge_forward(const NetworkParams<T>&, const Var<T>&, const Var<T>&);               \
  template Tensor<T> discriminator_forward(const NetworkParams<T>&, const ImageBuffer&, const ImageBuffer&, \
                                           const ImageBuffer&);                                            \
  template std::vector<Tensor<T>> feature_extract(const NetworkParams<T>&, const ImageBuffer&);

FUSELITE_INSTANTIATE_NETS(float)
FUSELITE_INSTANTIATE_NETS(double)

#undef FUSELITE_INSTANTIATE_NETS

}  // namespace fuselite
