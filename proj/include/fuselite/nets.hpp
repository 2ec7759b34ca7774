#pragma once

// Network definitions: homography regressor, attention module, U-Net merger,
// PatchGAN discriminator and a VGG-19-shaped feature extractor.
//
// Conventions shared by all nets: zero "same" padding, leaky ReLU slope 0.2,
// instance norm eps 1e-5, inputs in [0, 1]. Convs followed by instance norm
// carry no bias (the norm would cancel it).

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "fuselite/autograd.hpp"
#include "fuselite/geometry.hpp"
#include "fuselite/image.hpp"

namespace fuselite {

enum class NetworkKind { homography, attention, merge, discriminator, feature_extractor };

std::string_view kind_name(NetworkKind kind);
NetworkKind parse_kind(std::string_view name);

inline constexpr std::string_view kArchVersion = "fuselite-nets/1";
inline constexpr double kLeakySlope = 0.2;
inline constexpr double kNormEps = 1e-5;

struct ArchSpec {
  NetworkKind kind = NetworkKind::homography;
  // homography: side of the square input (multiple of 64).
  int input_size = 256;
  // attention/merge: feature channels; discriminator/feature_extractor: first-layer filters.
  int width = 64;
  // merge: number of stride-2 levels.
  int depth = 7;
  // feature_extractor: weights come from a classification-trained VGG-19.
  bool pretrained = false;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

ArchSpec default_arch(NetworkKind kind);

enum class ParamInit { he_normal, zeros, ones };

struct ParamShape {
  std::string name;
  Shape shape;
  bool trainable = true;
  ParamInit init = ParamInit::zeros;
  int fan_in = 0;
};

// Every tensor the architecture owns, in canonical order.
std::vector<ParamShape> expected_shapes(const ArchSpec& arch);

template <typename T>
class NetworkParams {
 public:
  struct Entry {
    std::string name;
    ag::Var<T> var;
    bool trainable = true;
  };

  NetworkParams() = default;
  explicit NetworkParams(ArchSpec arch) : arch_(arch) {}

  const ArchSpec& arch() const noexcept { return arch_; }
  NetworkKind kind() const noexcept { return arch_.kind; }

  void add(std::string name, Tensor<T> value, bool trainable);
  bool contains(std::string_view name) const;
  // Throws InvalidArgument for unknown names.
  const ag::Var<T>& get(std::string_view name) const;
  ag::Var<T>& get(std::string_view name);

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<ag::Var<T>> trainable_vars() const;
  std::size_t parameter_count() const;

  // Turns gradient accumulation on or off for every trainable tensor.
  void set_frozen(bool frozen);

  // Copies shared handles; clone() copies values.
  NetworkParams clone() const;

  template <typename U>
  NetworkParams<U> cast() const {
    NetworkParams<U> out(arch_);
    for (const auto& e : entries_) {
      out.add(e.name, e.var.value().template cast<U>(), e.trainable);
    }
    return out;
  }

  // FNV-1a over names and raw values; detects any mutation.
  std::uint64_t fingerprint() const;

 private:
  ArchSpec arch_{};
  std::vector<Entry> entries_;
};

// He-normal conv/dense weights (variance 2 / fan_in), zero biases, identity
// norm affine. Deterministic for a given rng state.
template <typename T>
NetworkParams<T> init_params(const ArchSpec& arch, std::mt19937_64& rng);

enum class AttentionMode { learned, ones, zeros };

template <typename T>
struct AttentionOutput {
  ag::Var<T> f1;
  ag::Var<T> f2;
  ag::Var<T> f2p;
  ag::Var<T> a2;
};

// (N, 8, S, S) -> (N, 8, 1, 1) corner offsets in pixels of the S x S input,
// interleaved (du0, dv0, ..., du3, dv3).
template <typename T>
ag::Var<T> homography_net(const NetworkParams<T>& p, const ag::Var<T>& input);

template <typename T>
AttentionOutput<T> attention_net(const NetworkParams<T>& p, const ag::Var<T>& i1, const ag::Var<T>& i2w,
                                 AttentionMode mode = AttentionMode::learned);

template <typename T>
ag::Var<T> merge_net(const NetworkParams<T>& p, const ag::Var<T>& f1, const ag::Var<T>& f2p);

template <typename T>
ag::Var<T> discriminator_net(const NetworkParams<T>& p, const ag::Var<T>& i1, const ag::Var<T>& i2w,
                             const ag::Var<T>& x);

// Taps: input, conv1_2, conv2_2, conv3_2, conv4_2, conv5_2 (post-ReLU).
template <typename T>
std::vector<ag::Var<T>> feature_taps(const NetworkParams<T>& phi, const ag::Var<T>& image);

// Builds the 8-channel homography input: under, over, MTB(under), MTB(over).
template <typename T>
Tensor<T> homography_input(const ImageBuffer& under, const ImageBuffer& over, const Bitmap& mtb_under,
                           const Bitmap& mtb_over);

// Single-image entry points.
template <typename T>
CornerOffsets homography_forward(const NetworkParams<T>& p, const ImageBuffer& i1, const ImageBuffer& i2,
                                 const Bitmap& mtb1, const Bitmap& mtb2);

template <typename T>
AttentionOutput<T> attention_forward(const NetworkParams<T>& p, const ImageBuffer& i1,
                                     const ImageBuffer& i2w, AttentionMode mode = AttentionMode::learned);

template <typename T>
ImageBuffer merge_forward(const NetworkParams<T>& p, const ag::Var<T>& f1, const ag::Var<T>& f2p);

template <typename T>
Tensor<T> discriminator_forward(const NetworkParams<T>& p, const ImageBuffer& i1, const ImageBuffer& i2w,
                                const ImageBuffer& x);

template <typename T>
std::vector<Tensor<T>> feature_extract(const NetworkParams<T>& phi, const ImageBuffer& image);

}  // namespace fuselite
