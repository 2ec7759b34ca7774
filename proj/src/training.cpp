#include "fuselite/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "fuselite/archive.hpp"
#include "fuselite/mtb.hpp"
#include "fuselite/ops.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fuselite {

using ag::Var;

namespace {

// Stream salts keep stage-2 and validation draws independent of stage 1.
constexpr std::uint64_t kFusionSalt = 0x9E3779B97F4A7C15ULL;
constexpr std::uint64_t kValSalt = 0xC2B2AE3D27D4EB4FULL;

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

void write_json_atomic(const fs::path& path, const json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    require(static_cast<bool>(out), ErrorCode::IoError, "cannot write " + tmp.string());
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::CheckpointMismatch, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::CheckpointMismatch, "bad JSON in " + path.string() + ": " + e.what());
  }
}

json yaml_to_json(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Map: {
      json out = json::object();
      for (const auto& kv : node) {
        out[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      }
      return out;
    }
    case YAML::NodeType::Sequence: {
      json out = json::array();
      for (const auto& item : node) {
        out.push_back(yaml_to_json(item));
      }
      return out;
    }
    case YAML::NodeType::Scalar: {
      const std::string s = node.Scalar();
      if (node.Tag() == "!") {
        return s;  // quoted
      }
      if (s == "true" || s == "True") {
        return true;
      }
      if (s == "false" || s == "False") {
        return false;
      }
      char* end = nullptr;
      const long long i = std::strtoll(s.c_str(), &end, 10);
      if (!s.empty() && *end == '\0') {
        return i;
      }
      const double d = std::strtod(s.c_str(), &end);
      if (!s.empty() && *end == '\0') {
        return d;
      }
      return s;
    }
    default:
      return nullptr;
  }
}

std::string as_path_string(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

void check_finite(double value, const std::string& name, std::int64_t step) {
  require(std::isfinite(value), ErrorCode::NonFiniteLoss,
          name + " became " + std::to_string(value) + " at step " + std::to_string(step));
}

template <typename T>
std::vector<T> join(std::vector<T> a, const std::vector<T>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

int derived_iterations(const TrainConfig& cfg, std::size_t pairs) {
  if (cfg.iterations_per_epoch > 0) {
    return cfg.iterations_per_epoch;
  }
  return std::max<int>(1, static_cast<int>((pairs + cfg.batch_size - 1) / cfg.batch_size));
}

std::vector<ManifestEntry> resolve_entries(std::vector<ManifestEntry> entries, const fs::path& root) {
  if (root.empty()) {
    return entries;
  }
  for (auto& e : entries) {
    for (fs::path* p : {&e.under, &e.over, &e.reference}) {
      if (p->is_relative()) {
        *p = root / *p;
      }
    }
  }
  return entries;
}

struct GeneratorOut {
  AttentionOutput<float> att;
  Var<float> fused;
};

GeneratorOut run_generator(const NetworkParams<float>& attention, const NetworkParams<float>& merge,
                           const Var<float>& i1, const Var<float>& i2w) {
  GeneratorOut out;
  out.att = attention_net(attention, i1, i2w);
  out.fused = merge_net(merge, out.att.f1, out.att.f2p);
  return out;
}

FusionBatch make_fusion_batch(const PairDataset& data, const TrainConfig& cfg, const NetworkParams<float>& nh,
                              std::uint64_t seed, std::uint64_t first, int count) {
  std::vector<Tensor<float>> i1, i2w, ref;
  const OffsetPredictor predict = homography_predictor(nh);
  for (int b = 0; b < count; ++b) {
    const std::uint64_t index = first + static_cast<std::uint64_t>(b);
    ImageBuffer aligned;
    TrainingSample s;
    if (cfg.fusion_max_disturbance > 0.0) {
      s = draw_sample(data, seed, index, cfg.fusion_max_disturbance, cfg.fusion_patch_size);
      const Size size = s.under_patch.size();
      try {
        aligned = warp_image(s.over_patch_warped, offsets_to_matrix(predict(s.under_patch, s.over_patch_warped)), size)
                      .image;
      } catch (const Error&) {
        aligned = s.over_patch_warped;
      }
    } else {
      s = draw_sample(data, seed, index, 0.0, cfg.fusion_patch_size);
      aligned = s.over_patch_aligned;
    }
    i1.push_back(to_tensor<float>(s.under_patch));
    i2w.push_back(to_tensor<float>(aligned));
    ref.push_back(to_tensor<float>(s.reference_patch));
  }
  return {concat_batch(i1), concat_batch(i2w), concat_batch(ref)};
}

}  // namespace

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  require(stage1_epochs >= 0 && stage2_epochs >= 0, ErrorCode::InvalidArgument, "epochs must be >= 0");
  require(batch_size > 0, ErrorCode::InvalidArgument, "batch_size must be positive");
  require(iterations_per_epoch >= 0, ErrorCode::InvalidArgument, "iterations_per_epoch must be >= 0");
  require(std::isfinite(learning_rate) && learning_rate >= 0.0, ErrorCode::InvalidArgument,
          "learning_rate must be >= 0");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorCode::InvalidArgument,
          "betas must lie in [0, 1)");
  require(load_size.width > 0 && load_size.height > 0, ErrorCode::InvalidArgument, "load_size must be positive");
  require(max_disturbance >= 0.0 && fusion_max_disturbance >= 0.0, ErrorCode::InvalidArgument,
          "disturbances must be >= 0");
  require(patch_size >= 64 && patch_size % 64 == 0, ErrorCode::InvalidArgument,
          "patch_size must be a positive multiple of 64");
  require(merge_depth >= 1 && fusion_patch_size > 0 && fusion_patch_size % (1 << merge_depth) == 0,
          ErrorCode::InvalidArgument, "fusion_patch_size must be divisible by 2^merge_depth");
  require(fusion_patch_size % 16 == 0, ErrorCode::InvalidArgument, "fusion_patch_size must be divisible by 16");
  require(attention_width > 0 && discriminator_width > 0 && phi_width > 0, ErrorCode::InvalidArgument,
          "widths must be positive");
  require(val_samples >= 0 && threshold_px >= 0.0 && checkpoint_every > 0, ErrorCode::InvalidArgument,
          "invalid validation or checkpoint settings");
  weights.validate();
}

json config_to_json(const TrainConfig& c) {
  return {{"stage1_epochs", c.stage1_epochs},
          {"stage2_epochs", c.stage2_epochs},
          {"batch_size", c.batch_size},
          {"iterations_per_epoch", c.iterations_per_epoch},
          {"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"seed", c.seed},
          {"data_root", c.data_root.string()},
          {"manifest", c.manifest.string()},
          {"load_size", {c.load_size.width, c.load_size.height}},
          {"max_disturbance", c.max_disturbance},
          {"patch_size", c.patch_size},
          {"fusion_patch_size", c.fusion_patch_size},
          {"fusion_max_disturbance", c.fusion_max_disturbance},
          {"val_samples", c.val_samples},
          {"threshold_px", c.threshold_px},
          {"attention_width", c.attention_width},
          {"merge_depth", c.merge_depth},
          {"discriminator_width", c.discriminator_width},
          {"phi_width", c.phi_width},
          {"phi_weights", c.phi_weights.string()},
          {"phi_seed", c.phi_seed},
          {"weights", {{"lambda", c.weights.lambda}, {"w1", c.weights.w1}, {"w2", c.weights.w2}}},
          {"d_band_low", c.d_band_low},
          {"d_band_high", c.d_band_high},
          {"checkpoint_dir", c.checkpoint_dir.string()},
          {"metrics_path", c.metrics_path.string()},
          {"checkpoint_every", c.checkpoint_every},
          {"cache_images", c.cache_images}};
}

TrainConfig config_from_json(const json& j) {
  require(j.is_object() || j.is_null(), ErrorCode::InvalidArgument, "config must be a mapping");
  TrainConfig c;
  if (j.is_null()) {
    return c;
  }
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "stage1_epochs") c.stage1_epochs = v.get<int>();
      else if (key == "stage2_epochs") c.stage2_epochs = v.get<int>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "iterations_per_epoch") c.iterations_per_epoch = v.get<int>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "data_root") c.data_root = as_path_string(v);
      else if (key == "manifest") c.manifest = as_path_string(v);
      else if (key == "load_size") {
        const auto dims = v.get<std::vector<int>>();
        require(dims.size() == 2, ErrorCode::InvalidArgument, "load_size needs [width, height]");
        c.load_size = {dims[0], dims[1]};
      } else if (key == "max_disturbance") c.max_disturbance = v.get<double>();
      else if (key == "patch_size") c.patch_size = v.get<int>();
      else if (key == "fusion_patch_size") c.fusion_patch_size = v.get<int>();
      else if (key == "fusion_max_disturbance") c.fusion_max_disturbance = v.get<double>();
      else if (key == "val_samples") c.val_samples = v.get<int>();
      else if (key == "threshold_px") c.threshold_px = v.get<double>();
      else if (key == "attention_width") c.attention_width = v.get<int>();
      else if (key == "merge_depth") c.merge_depth = v.get<int>();
      else if (key == "discriminator_width") c.discriminator_width = v.get<int>();
      else if (key == "phi_width") c.phi_width = v.get<int>();
      else if (key == "phi_weights") c.phi_weights = as_path_string(v);
      else if (key == "phi_seed") c.phi_seed = v.get<std::uint64_t>();
      else if (key == "weights") {
        for (const auto& [wk, wv] : v.items()) {
          if (wk == "lambda") {
            const auto l = wv.get<std::vector<double>>();
            require(l.size() == 6, ErrorCode::InvalidArgument, "weights.lambda needs 6 values");
            std::copy(l.begin(), l.end(), c.weights.lambda.begin());
          } else if (wk == "w1") c.weights.w1 = wv.get<double>();
          else if (wk == "w2") c.weights.w2 = wv.get<double>();
          else fail(ErrorCode::InvalidArgument, "unknown key weights." + wk);
        }
      } else if (key == "d_band_low") c.d_band_low = v.get<double>();
      else if (key == "d_band_high") c.d_band_high = v.get<double>();
      else if (key == "checkpoint_dir") c.checkpoint_dir = as_path_string(v);
      else if (key == "metrics_path") c.metrics_path = as_path_string(v);
      else if (key == "checkpoint_every") c.checkpoint_every = v.get<int>();
      else if (key == "cache_images") c.cache_images = v.get<bool>();
      else fail(ErrorCode::InvalidArgument, "unknown config key '" + key + "'");
    } catch (const json::exception& e) {
      fail(ErrorCode::InvalidArgument, "config key '" + key + "': " + e.what());
    }
  }
  return c;
}

TrainConfig parse_train_config(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("config is not valid YAML: ") + e.what());
  }
  TrainConfig cfg = config_from_json(yaml_to_json(root));
  cfg.validate();
  return cfg;
}

TrainConfig load_train_config(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::InvalidArgument, "cannot read config " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse_train_config(text.str());
}

std::uint64_t config_hash(const TrainConfig& cfg) {
  json j = config_to_json(cfg);
  for (const char* key : {"stage1_epochs", "stage2_epochs", "data_root", "manifest", "checkpoint_dir",
                          "metrics_path", "checkpoint_every", "cache_images", "val_samples", "threshold_px",
                          "d_band_low", "d_band_high"}) {
    j.erase(key);
  }
  return fnv1a(j.dump());
}

ArchSpec homography_arch(const TrainConfig& cfg) {
  ArchSpec a = default_arch(NetworkKind::homography);
  a.input_size = cfg.patch_size;
  return a;
}

ArchSpec attention_arch(const TrainConfig& cfg) {
  ArchSpec a = default_arch(NetworkKind::attention);
  a.width = cfg.attention_width;
  return a;
}

ArchSpec merge_arch(const TrainConfig& cfg) {
  ArchSpec a = default_arch(NetworkKind::merge);
  a.width = cfg.attention_width;
  a.depth = cfg.merge_depth;
  return a;
}

ArchSpec discriminator_arch(const TrainConfig& cfg) {
  ArchSpec a = default_arch(NetworkKind::discriminator);
  a.width = cfg.discriminator_width;
  return a;
}

ArchSpec phi_arch(const TrainConfig& cfg) {
  ArchSpec a = default_arch(NetworkKind::feature_extractor);
  a.width = cfg.phi_width;
  a.pretrained = !cfg.phi_weights.empty();
  return a;
}

std::mt19937_64 network_rng(std::uint64_t seed, NetworkKind kind) {
  return sample_rng(seed, 0xFFFF0000ULL + static_cast<std::uint64_t>(kind));
}

NetworkParams<float> make_feature_extractor(const TrainConfig& cfg) {
  if (!cfg.phi_weights.empty()) {
    NetworkParams<float> phi = load_feature_extractor<float>(cfg.phi_weights);
    require(phi.arch().pretrained, ErrorCode::WeightsUnavailable,
            cfg.phi_weights.string() + " is not marked as pretrained");
    return phi;
  }
  std::mt19937_64 rng = network_rng(cfg.phi_seed, NetworkKind::feature_extractor);
  return init_params<float>(phi_arch(cfg), rng);
}

// ---------------------------------------------------------------- metrics

MetricsLog::MetricsLog() : start_(std::chrono::steady_clock::now()) {}

MetricsLog::MetricsLog(const fs::path& path, bool append) : MetricsLog() {
  if (path.empty()) {
    return;
  }
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  out_ = std::make_unique<std::ofstream>(path, append ? std::ios::app : std::ios::trunc);
  require(static_cast<bool>(*out_), ErrorCode::IoError, "cannot open metrics file " + path.string());
}

void MetricsLog::log(std::int64_t step, int epoch, const std::string& name, double value) {
  const double wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  records_.push_back({step, epoch, name, value, wall_ms});
  if (out_) {
    json j{{"step", step}, {"epoch", epoch}, {"loss_name", name}, {"wall_ms", std::round(wall_ms)}};
    j["value"] = std::isfinite(value) ? json(value) : json(std::to_string(value));
    *out_ << j.dump() << '\n';
    out_->flush();
  }
}

std::vector<double> MetricsLog::values(const std::string& name) const {
  std::vector<double> out;
  for (const auto& r : records_) {
    if (r.name == name) {
      out.push_back(r.value);
    }
  }
  return out;
}

// ---------------------------------------------------------------- data

PairDataset::PairDataset(std::vector<ManifestEntry> entries, Size load_size, bool cache)
    : entries_(std::move(entries)), load_size_(load_size), cache_(cache), count_(entries_.size()),
      slots_(entries_.size()) {}

PairDataset PairDataset::from_pairs(std::vector<ImagePair> pairs) {
  PairDataset d;
  d.count_ = pairs.size();
  for (auto& p : pairs) {
    require(p.under.size() == p.over.size() && p.under.size() == p.reference.size(), ErrorCode::DimensionMismatch,
            "pair images differ in size");
    d.slots_.push_back(std::make_shared<const ImagePair>(std::move(p)));
  }
  return d;
}

std::shared_ptr<const ImagePair> PairDataset::get(std::size_t index) const {
  require(index < count_, ErrorCode::InvalidArgument, "pair index out of range");
  if (slots_[index]) {
    return slots_[index];
  }
  const ManifestEntry& e = entries_[index];
  auto pair = std::make_shared<ImagePair>();
  pair->scene_id = e.scene_id;
  pair->under = resize_image(read_image(e.under), load_size_);
  pair->over = resize_image(read_image(e.over), load_size_);
  pair->reference = resize_image(read_image(e.reference), load_size_);
  std::shared_ptr<const ImagePair> out = std::move(pair);
  if (cache_) {
    slots_[index] = out;
  }
  return out;
}

TrainingSample draw_sample(const PairDataset& data, std::uint64_t seed, std::uint64_t index,
                           double max_disturbance, int patch_size) {
  require(!data.empty(), ErrorCode::DataUnavailable, "no pairs to sample from");
  std::mt19937_64 rng = sample_rng(seed, index);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  const auto pair = data.get(pick(rng));
  return make_training_sample(pair->under, pair->over, pair->reference, rng, max_disturbance, patch_size);
}

std::vector<TrainingSample> make_test_samples(const PairDataset& data, std::uint64_t seed, int count,
                                              double max_disturbance, int patch_size) {
  std::vector<TrainingSample> out;
  for (int i = 0; i < count; ++i) {
    out.push_back(draw_sample(data, seed, static_cast<std::uint64_t>(i), max_disturbance, patch_size));
  }
  return out;
}

template <typename T>
Tensor<T> concat_batch(const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), ErrorCode::InvalidArgument, "empty batch");
  const Shape s = parts.front().shape();
  Tensor<T> out(Shape{static_cast<int>(parts.size()) * s.n, s.c, s.h, s.w});
  T* dst = out.data();
  for (const auto& p : parts) {
    require(p.shape() == s, ErrorCode::ShapeMismatch, "batch members differ: " + p.shape().str() + " vs " + s.str());
    dst = std::copy(p.data(), p.data() + p.size(), dst);
  }
  return out;
}

template Tensor<float> concat_batch(const std::vector<Tensor<float>>&);
template Tensor<double> concat_batch(const std::vector<Tensor<double>>&);

// ---------------------------------------------------------------- alignment

OffsetPredictor homography_predictor(const NetworkParams<float>& nh) {
  require(nh.kind() == NetworkKind::homography, ErrorCode::InvalidArgument, "predictor needs homography params");
  return [nh](const ImageBuffer& under, const ImageBuffer& over) {
    require(under.size() == over.size(), ErrorCode::DimensionMismatch, "under and over differ in size");
    const Size in{nh.arch().input_size, nh.arch().input_size};
    const ImageBuffer u = under.size() == in ? under : resize_image(under, in);
    const ImageBuffer o = over.size() == in ? over : resize_image(over, in);
    const CornerOffsets at_input = homography_forward(nh, u, o, compute_mtb(u), compute_mtb(o));
    return rescale_offsets(at_input, in, under.size());
  };
}

AlignmentReport evaluate_alignment(const OffsetPredictor& predict, const std::vector<TrainingSample>& samples,
                                   double threshold_px) {
  AlignmentReport r;
  r.pairs = static_cast<int>(samples.size());
  r.threshold_px = threshold_px;
  if (samples.empty()) {
    return r;
  }
  int successes = 0;
  for (const auto& s : samples) {
    const Size size = s.under_patch.size();
    const CornerOffsets pred = predict(s.under_patch, s.over_patch_warped);
    const double err = mean_corner_error(pred, s.gt_offsets);
    CornerOffsets zero;
    zero.patch_size = s.gt_offsets.patch_size;
    r.baseline_error += mean_corner_error(zero, s.gt_offsets);
    r.errors.push_back(err);
    successes += err <= threshold_px ? 1 : 0;

    const Bitmap under_mtb = compute_mtb(s.under_patch);
    r.xor_before += xor_difference(under_mtb, compute_mtb(s.over_patch_warped)).ratio;
    try {
      const WarpResult w = warp_image(s.over_patch_warped, offsets_to_matrix(pred), size);
      r.xor_after += masked_xor_ratio(under_mtb, compute_mtb(w.image), w.validity);
    } catch (const Error&) {
      r.xor_after += 0.5;  // degenerate prediction scores at chance level
    }
  }
  const double n = static_cast<double>(samples.size());
  r.success_rate = successes / n;
  r.mean_error = std::accumulate(r.errors.begin(), r.errors.end(), 0.0) / n;
  std::vector<double> sorted = r.errors;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = sorted.size() / 2;
  r.median_error = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  r.baseline_error /= n;
  r.xor_before /= n;
  r.xor_after /= n;
  return r;
}

AlignmentReport evaluate_alignment(const NetworkParams<float>& nh, const std::vector<TrainingSample>& samples,
                                   double threshold_px) {
  return evaluate_alignment(homography_predictor(nh), samples, threshold_px);
}

// ---------------------------------------------------------------- checkpoints

json state_to_json(const TrainerState& s) {
  return {{"stage", s.stage},
          {"epoch", s.epoch},
          {"step", s.step},
          {"next_sample", s.next_sample},
          {"config_hash", std::to_string(s.config_hash)},
          {"seed", s.seed}};
}

TrainerState state_from_json(const json& j) {
  TrainerState s;
  try {
    s.stage = j.at("stage").get<int>();
    s.epoch = j.at("epoch").get<int>();
    s.step = j.at("step").get<std::int64_t>();
    s.next_sample = j.at("next_sample").get<std::uint64_t>();
    s.config_hash = std::stoull(j.at("config_hash").get<std::string>());
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const std::exception& e) {
    fail(ErrorCode::CheckpointMismatch, std::string("bad trainer state: ") + e.what());
  }
  return s;
}

template <typename T>
void save_adam(const fs::path& path, const Adam<T>& adam) {
  Archive a;
  a.kind = "adam";
  a.meta = {{"steps", adam.steps()},
            {"learning_rate", adam.options().learning_rate},
            {"beta1", adam.options().beta1},
            {"beta2", adam.options().beta2},
            {"epsilon", adam.options().epsilon}};
  const auto& moments = adam.moments();
  for (std::size_t i = 0; i < moments.size(); ++i) {
    a.tensors.emplace_back("m." + std::to_string(i), moments[i].m.template cast<float>());
    a.tensors.emplace_back("v." + std::to_string(i), moments[i].v.template cast<float>());
  }
  write_archive(path, a);
}

template <typename T>
void load_adam(const fs::path& path, Adam<T>& adam) {
  const Archive a = read_archive(path);
  require(a.kind == "adam", ErrorCode::CheckpointMismatch, path.string() + " is not optimizer state");
  auto& moments = adam.moments();
  require(a.tensors.size() == 2 * moments.size(), ErrorCode::CheckpointMismatch,
          path.string() + ": optimizer state covers a different parameter list");
  for (std::size_t i = 0; i < moments.size(); ++i) {
    const Tensor<float>& m = a.tensor("m." + std::to_string(i));
    const Tensor<float>& v = a.tensor("v." + std::to_string(i));
    require(m.shape() == moments[i].m.shape() && v.shape() == moments[i].v.shape(), ErrorCode::CheckpointMismatch,
            path.string() + ": moment " + std::to_string(i) + " shape mismatch");
    moments[i].m = m.template cast<T>();
    moments[i].v = v.template cast<T>();
  }
  adam.set_steps(a.meta.at("steps").get<std::int64_t>());
}

template void save_adam(const fs::path&, const Adam<float>&);
template void load_adam(const fs::path&, Adam<float>&);

NetworkParams<float> load_homography_checkpoint(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "homography.flarch" : path;
  require(fs::is_regular_file(file), ErrorCode::CheckpointMismatch,
          "no homography checkpoint at " + path.string());
  NetworkParams<float> p = load_params<float>(file);
  require(p.kind() == NetworkKind::homography, ErrorCode::CheckpointMismatch,
          file.string() + " does not hold homography parameters");
  return p;
}

// ---------------------------------------------------------------- stage 1

HomographyTrainer::HomographyTrainer(TrainConfig cfg, const PairDataset& train) : cfg_(std::move(cfg)), train_(&train) {
  cfg_.validate();
  require(!train.empty(), ErrorCode::DataUnavailable, "stage 1 needs at least one training pair");
  std::mt19937_64 rng = network_rng(cfg_.seed, NetworkKind::homography);
  params_ = init_params<float>(homography_arch(cfg_), rng);
  adam_ = std::make_unique<Adam<float>>(params_.trainable_vars(),
                                        AdamOptions{cfg_.learning_rate, cfg_.beta1, cfg_.beta2, 1e-8});
  state_.stage = 1;
  state_.config_hash = config_hash(cfg_);
  state_.seed = cfg_.seed;
}

void HomographyTrainer::build_batch(std::uint64_t first_sample, Tensor<float>& input, Tensor<float>& target) const {
  std::vector<Tensor<float>> inputs, targets;
  for (int b = 0; b < cfg_.batch_size; ++b) {
    const TrainingSample s =
        draw_sample(*train_, cfg_.seed, first_sample + static_cast<std::uint64_t>(b), cfg_.max_disturbance,
                    cfg_.patch_size);
    inputs.push_back(homography_input<float>(s.under_patch, s.over_patch_warped, compute_mtb(s.under_patch),
                                             compute_mtb(s.over_patch_warped)));
    Tensor<float> t(Shape{1, 8, 1, 1});
    const auto flat = s.gt_offsets.flat();
    for (int i = 0; i < 8; ++i) {
      t[static_cast<std::size_t>(i)] = static_cast<float>(flat[static_cast<std::size_t>(i)]);
    }
    targets.push_back(std::move(t));
  }
  input = concat_batch(inputs);
  target = concat_batch(targets);
}

double HomographyTrainer::step() {
  Tensor<float> input, target;
  build_batch(state_.next_sample, input, target);
  const Var<float> pred = homography_net(params_, Var<float>::constant(std::move(input)));
  const Var<float> loss = homography_loss(pred, Var<float>::constant(std::move(target)));
  const double value = loss.value()[0];
  check_finite(value, "homography_loss", state_.step);
  adam_->zero_grad();
  loss.backward();
  adam_->step();
  state_.next_sample += static_cast<std::uint64_t>(cfg_.batch_size);
  ++state_.step;
  return value;
}

double HomographyTrainer::batch_loss(std::uint64_t first_sample) const {
  ag::NoGradGuard guard;
  Tensor<float> input, target;
  build_batch(first_sample, input, target);
  const Var<float> pred = homography_net(params_, Var<float>::constant(std::move(input)));
  return homography_loss(pred, Var<float>::constant(std::move(target))).value()[0];
}

void HomographyTrainer::save(const fs::path& dir) const {
  fs::create_directories(dir);
  save_params(dir / "homography.flarch", params_, {{"config_hash", std::to_string(state_.config_hash)}});
  save_adam(dir / "homography.adam.flarch", *adam_);
  write_json_atomic(dir / "trainer.json", {{"state", state_to_json(state_)}, {"config", config_to_json(cfg_)}});
}

void HomographyTrainer::restore(const fs::path& dir) {
  const TrainerState s = state_from_json(read_json(dir / "trainer.json").at("state"));
  require(s.stage == 1, ErrorCode::CheckpointMismatch, dir.string() + " is not a stage-1 checkpoint");
  require(s.config_hash == config_hash(cfg_), ErrorCode::CheckpointMismatch,
          dir.string() + " was written with a different training configuration");
  const ArchSpec arch = homography_arch(cfg_);
  params_ = load_params<float>(dir / "homography.flarch", &arch);
  adam_ = std::make_unique<Adam<float>>(params_.trainable_vars(), adam_->options());
  load_adam(dir / "homography.adam.flarch", *adam_);
  state_ = s;
}

Stage1Result run_stage1(HomographyTrainer& trainer, const PairDataset& val, MetricsLog& log) {
  const TrainConfig& cfg = trainer.config();
  const int iterations = derived_iterations(cfg, trainer.train_pairs());
  const auto val_samples = make_test_samples(val, cfg.seed ^ kValSalt, cfg.val_samples, cfg.max_disturbance,
                                             cfg.patch_size);
  Stage1Result result;
  while (trainer.state().epoch < cfg.stage1_epochs) {
    double sum = 0.0;
    for (int it = 0; it < iterations; ++it) {
      const double loss = trainer.step();
      sum += loss;
      log.log(trainer.state().step, trainer.state().epoch, "homography_loss", loss);
    }
    ++trainer.state().epoch;
    result.epoch_loss.push_back(sum / iterations);
    log.log(trainer.state().step, trainer.state().epoch, "epoch_homography_loss", sum / iterations);
    if (!val_samples.empty()) {
      result.final_val = evaluate_alignment(trainer.params(), val_samples, cfg.threshold_px);
      result.epoch_val_error.push_back(result.final_val.mean_error);
      log.log(trainer.state().step, trainer.state().epoch, "val_corner_error", result.final_val.mean_error);
      log.log(trainer.state().step, trainer.state().epoch, "val_success_rate", result.final_val.success_rate);
    }
    if (!cfg.checkpoint_dir.empty() &&
        (trainer.state().epoch % cfg.checkpoint_every == 0 || trainer.state().epoch == cfg.stage1_epochs)) {
      trainer.save(cfg.checkpoint_dir);
    }
  }
  if (result.epoch_val_error.empty() && !val_samples.empty()) {
    result.final_val = evaluate_alignment(trainer.params(), val_samples, cfg.threshold_px);
  }
  result.homography = trainer.params();
  return result;
}

namespace {

struct Splits {
  PairDataset train;
  PairDataset val;
  std::size_t train_pairs = 0;
};

Splits load_splits(const TrainConfig& cfg, const std::vector<ManifestEntry>& manifest) {
  const auto entries = resolve_entries(manifest, cfg.data_root);
  auto train = filter_split(entries, "train");
  auto val = filter_split(entries, "val");
  require(!train.empty(), ErrorCode::DataUnavailable, "manifest has no training pairs");
  if (val.empty()) {
    val = train;
  }
  Splits s;
  s.train_pairs = train.size();
  s.train = PairDataset(std::move(train), cfg.load_size, cfg.cache_images);
  s.val = PairDataset(std::move(val), cfg.load_size, cfg.cache_images);
  return s;
}

}  // namespace

Stage1Result train_stage1(const TrainConfig& cfg, const std::vector<ManifestEntry>& manifest, MetricsLog& log,
                          bool resume) {
  cfg.validate();
  const Splits data = load_splits(cfg, manifest);
  TrainConfig effective = cfg;
  effective.iterations_per_epoch = derived_iterations(cfg, data.train_pairs);
  HomographyTrainer trainer(effective, data.train);
  if (resume && !cfg.checkpoint_dir.empty() && fs::exists(cfg.checkpoint_dir / "trainer.json")) {
    trainer.restore(cfg.checkpoint_dir);
  }
  return run_stage1(trainer, data.val, log);
}

// ---------------------------------------------------------------- stage 2

FusionTrainer::FusionTrainer(TrainConfig cfg, const PairDataset& train, NetworkParams<float> homography,
                             NetworkParams<float> phi)
    : cfg_(std::move(cfg)), train_(&train), homography_(std::move(homography)), phi_(std::move(phi)) {
  cfg_.validate();
  require(!train.empty(), ErrorCode::DataUnavailable, "stage 2 needs at least one training pair");
  require(homography_.kind() == NetworkKind::homography, ErrorCode::CheckpointMismatch,
          "stage 2 needs stage-1 homography parameters");
  require(phi_.kind() == NetworkKind::feature_extractor, ErrorCode::InvalidArgument,
          "stage 2 needs a feature extractor");
  homography_.set_frozen(true);
  phi_.set_frozen(true);
  std::mt19937_64 rng_a = network_rng(cfg_.seed, NetworkKind::attention);
  std::mt19937_64 rng_m = network_rng(cfg_.seed, NetworkKind::merge);
  std::mt19937_64 rng_d = network_rng(cfg_.seed, NetworkKind::discriminator);
  attention_ = init_params<float>(attention_arch(cfg_), rng_a);
  merge_ = init_params<float>(merge_arch(cfg_), rng_m);
  discriminator_ = init_params<float>(discriminator_arch(cfg_), rng_d);
  const AdamOptions opts{cfg_.learning_rate, cfg_.beta1, cfg_.beta2, 1e-8};
  adam_g_ = std::make_unique<Adam<float>>(generator_vars(), opts);
  adam_d_ = std::make_unique<Adam<float>>(discriminator_.trainable_vars(), opts);
  state_.stage = 2;
  state_.config_hash = config_hash(cfg_);
  state_.seed = cfg_.seed;
}

std::vector<Var<float>> FusionTrainer::generator_vars() const {
  return join(attention_.trainable_vars(), merge_.trainable_vars());
}

FusionBatch FusionTrainer::make_batch(std::uint64_t first_sample) const {
  return make_fusion_batch(*train_, cfg_, homography_, cfg_.seed ^ kFusionSalt, first_sample, cfg_.batch_size);
}

FusionLosses FusionTrainer::step() {
  const FusionBatch batch = make_batch(state_.next_sample);
  const auto i1 = Var<float>::constant(batch.i1);
  const auto i2w = Var<float>::constant(batch.i2w);
  const auto ref = Var<float>::constant(batch.reference);
  std::vector<Var<float>> ref_taps;
  {
    ag::NoGradGuard guard;
    ref_taps = feature_taps(phi_, ref);
  }

  FusionLosses out;
  const GeneratorOut gen = run_generator(attention_, merge_, i1, i2w);
  const bool adversarial = cfg_.weights.w2 > 0.0;

  if (adversarial) {
    const Var<float> fake = gen.fused.detach();
    const Var<float> d_loss =
        discriminator_loss(discriminator_net(discriminator_, i1, i2w, ref), discriminator_net(discriminator_, i1, i2w, fake));
    out.d = d_loss.value()[0];
    check_finite(out.d, "discriminator_loss", state_.step);
    adam_d_->zero_grad();
    d_loss.backward();
    adam_d_->step();
    out.d_updated = true;
  }

  const Var<float> feat = perceptual_loss_taps(phi_, gen.fused, ref_taps, cfg_.weights);
  Var<float> total;
  if (adversarial) {
    discriminator_.set_frozen(true);
    const Var<float> adv = adversarial_loss(discriminator_net(discriminator_, i1, i2w, gen.fused));
    discriminator_.set_frozen(false);
    out.adv = adv.value()[0];
    total = generator_loss(feat, adv, cfg_.weights);
  } else {
    total = ops::scale(feat, cfg_.weights.w1);
  }
  out.feat = feat.value()[0];
  out.g = total.value()[0];
  check_finite(out.feat, "feature_loss", state_.step);
  check_finite(out.adv, "adversarial_loss", state_.step);
  check_finite(out.g, "generator_loss", state_.step);
  adam_g_->zero_grad();
  total.backward();
  adam_g_->step();

  state_.next_sample += static_cast<std::uint64_t>(cfg_.batch_size);
  ++state_.step;
  return out;
}

std::pair<double, std::vector<Tensor<float>>> FusionTrainer::generator_gradients(const FusionBatch& batch) {
  const auto i1 = Var<float>::constant(batch.i1);
  const auto i2w = Var<float>::constant(batch.i2w);
  const auto ref = Var<float>::constant(batch.reference);
  auto vars = generator_vars();
  for (auto& v : vars) {
    v.zero_grad();
  }
  const GeneratorOut gen = run_generator(attention_, merge_, i1, i2w);
  const Var<float> feat = perceptual_loss(phi_, gen.fused, ref, cfg_.weights);
  discriminator_.set_frozen(true);
  const Var<float> adv = adversarial_loss(discriminator_net(discriminator_, i1, i2w, gen.fused));
  discriminator_.set_frozen(false);
  const Var<float> total = generator_loss(feat, adv, cfg_.weights);
  total.backward();
  std::vector<Tensor<float>> grads;
  for (auto& v : vars) {
    grads.push_back(v.grad().empty() ? Tensor<float>(v.shape()) : v.grad());
    v.zero_grad();
  }
  return {total.value()[0], std::move(grads)};
}

double FusionTrainer::feature_loss(const FusionBatch& batch) const {
  ag::NoGradGuard guard;
  const auto i1 = Var<float>::constant(batch.i1);
  const auto i2w = Var<float>::constant(batch.i2w);
  const GeneratorOut gen = run_generator(attention_, merge_, i1, i2w);
  return perceptual_loss(phi_, gen.fused, Var<float>::constant(batch.reference), cfg_.weights).value()[0];
}

void FusionTrainer::save(const fs::path& dir) const {
  fs::create_directories(dir);
  const json meta{{"config_hash", std::to_string(state_.config_hash)}};
  save_params(dir / "attention.flarch", attention_, meta);
  save_params(dir / "merge.flarch", merge_, meta);
  save_params(dir / "discriminator.flarch", discriminator_, meta);
  save_adam(dir / "generator.adam.flarch", *adam_g_);
  save_adam(dir / "discriminator.adam.flarch", *adam_d_);
  write_json_atomic(dir / "trainer.json", {{"state", state_to_json(state_)},
                                           {"config", config_to_json(cfg_)},
                                           {"homography_fingerprint", std::to_string(homography_.fingerprint())},
                                           {"phi_fingerprint", std::to_string(phi_.fingerprint())}});
}

void FusionTrainer::restore(const fs::path& dir) {
  const json j = read_json(dir / "trainer.json");
  const TrainerState s = state_from_json(j.at("state"));
  require(s.stage == 2, ErrorCode::CheckpointMismatch, dir.string() + " is not a stage-2 checkpoint");
  require(s.config_hash == config_hash(cfg_), ErrorCode::CheckpointMismatch,
          dir.string() + " was written with a different training configuration");
  require(j.value("homography_fingerprint", std::string()) == std::to_string(homography_.fingerprint()) &&
              j.value("phi_fingerprint", std::string()) == std::to_string(phi_.fingerprint()),
          ErrorCode::CheckpointMismatch, dir.string() + " was trained against different frozen networks");
  const ArchSpec a = attention_arch(cfg_);
  const ArchSpec m = merge_arch(cfg_);
  const ArchSpec d = discriminator_arch(cfg_);
  attention_ = load_params<float>(dir / "attention.flarch", &a);
  merge_ = load_params<float>(dir / "merge.flarch", &m);
  discriminator_ = load_params<float>(dir / "discriminator.flarch", &d);
  adam_g_ = std::make_unique<Adam<float>>(generator_vars(), adam_g_->options());
  adam_d_ = std::make_unique<Adam<float>>(discriminator_.trainable_vars(), adam_d_->options());
  load_adam(dir / "generator.adam.flarch", *adam_g_);
  load_adam(dir / "discriminator.adam.flarch", *adam_d_);
  state_ = s;
}

Stage2Result run_stage2(FusionTrainer& trainer, const PairDataset& val, MetricsLog& log) {
  const TrainConfig& cfg = trainer.config();
  const int iterations = derived_iterations(cfg, trainer.train_pairs());
  const std::uint64_t nh_before = trainer.homography().fingerprint();
  const std::uint64_t phi_before = trainer.phi().fingerprint();
  const int val_count = std::min(cfg.val_samples, 8);
  std::vector<FusionBatch> val_batches;
  for (int i = 0; i < val_count; ++i) {
    val_batches.push_back(make_fusion_batch(val, cfg, trainer.homography(), cfg.seed ^ kValSalt ^ kFusionSalt,
                                            static_cast<std::uint64_t>(i), 1));
  }

  Stage2Result result;
  while (trainer.state().epoch < cfg.stage2_epochs) {
    for (int it = 0; it < iterations; ++it) {
      const FusionLosses l = trainer.step();
      result.steps.push_back(l);
      const auto step = trainer.state().step;
      const int epoch = trainer.state().epoch;
      log.log(step, epoch, "feature_loss", l.feat);
      log.log(step, epoch, "generator_loss", l.g);
      if (l.d_updated) {
        log.log(step, epoch, "adversarial_loss", l.adv);
        log.log(step, epoch, "discriminator_loss", l.d);
      }
    }
    ++trainer.state().epoch;
    if (!val_batches.empty()) {
      double sum = 0.0;
      for (const auto& b : val_batches) {
        sum += trainer.feature_loss(b);
      }
      result.epoch_val_feat.push_back(sum / static_cast<double>(val_batches.size()));
      log.log(trainer.state().step, trainer.state().epoch, "val_feature_loss", result.epoch_val_feat.back());
    }
    if (!cfg.checkpoint_dir.empty() &&
        (trainer.state().epoch % cfg.checkpoint_every == 0 || trainer.state().epoch == cfg.stage2_epochs)) {
      trainer.save(cfg.checkpoint_dir);
    }
  }

  require(trainer.homography().fingerprint() == nh_before && trainer.phi().fingerprint() == phi_before,
          ErrorCode::InvalidArgument, "frozen networks changed during stage 2");

  std::size_t late = 0;
  std::size_t in_band = 0;
  for (std::size_t i = result.steps.size() / 2; i < result.steps.size(); ++i) {
    if (result.steps[i].d_updated) {
      ++late;
      in_band += result.steps[i].d >= cfg.d_band_low && result.steps[i].d <= cfg.d_band_high;
    }
  }
  result.d_band_fraction = late == 0 ? 0.0 : static_cast<double>(in_band) / static_cast<double>(late);
  result.attention = trainer.attention();
  result.merge = trainer.merge();
  result.discriminator = trainer.discriminator();
  return result;
}

Stage2Result train_stage2(const TrainConfig& cfg, const std::vector<ManifestEntry>& manifest,
                          const fs::path& homography_ckpt, MetricsLog& log, bool resume) {
  cfg.validate();
  NetworkParams<float> nh = load_homography_checkpoint(homography_ckpt);
  const Splits data = load_splits(cfg, manifest);
  TrainConfig effective = cfg;
  effective.iterations_per_epoch = derived_iterations(cfg, data.train_pairs);
  FusionTrainer trainer(effective, data.train, std::move(nh), make_feature_extractor(cfg));
  if (resume && !cfg.checkpoint_dir.empty() && fs::exists(cfg.checkpoint_dir / "trainer.json")) {
    trainer.restore(cfg.checkpoint_dir);
  }
  return run_stage2(trainer, data.val, log);
}

}  // namespace fuselite
