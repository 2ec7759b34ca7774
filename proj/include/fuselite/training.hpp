#pragma once

// Two-stage training: stage 1 fits the homography regressor on synthetic
// warps, stage 2 fits attention + merge against the discriminator with the
// homography regressor and feature extractor frozen.
//
// Samples are a pure function of (seed, sample index), so a run resumed from
// a checkpoint draws exactly the batches the uninterrupted run would have.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fuselite/adam.hpp"
#include "fuselite/dataio.hpp"
#include "fuselite/losses.hpp"
#include "fuselite/nets.hpp"

namespace fuselite {

struct TrainConfig {
  int stage1_epochs = 500;
  int stage2_epochs = 200;
  int batch_size = 4;
  // 0 derives ceil(training pairs / batch_size).
  int iterations_per_epoch = 0;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::uint64_t seed = 1;

  std::filesystem::path data_root;
  std::filesystem::path manifest;
  Size load_size = kDefaultLoadSize;
  double max_disturbance = kDefaultMaxDisturbance;
  // Stage-1 patch side; also the homography network input side.
  int patch_size = 256;
  int fusion_patch_size = 256;
  // > 0: stage-2 pairs are perturbed and re-aligned by the frozen regressor.
  double fusion_max_disturbance = 0.0;
  int val_samples = 32;
  double threshold_px = 5.0;

  int attention_width = 64;
  int merge_depth = 7;
  int discriminator_width = 64;
  int phi_width = 64;
  // Empty: seeded random frozen extractor.
  std::filesystem::path phi_weights;
  std::uint64_t phi_seed = 7;
  LossWeights weights;
  double d_band_low = 0.05;
  double d_band_high = 0.5;

  std::filesystem::path checkpoint_dir;
  std::filesystem::path metrics_path;
  int checkpoint_every = 1;
  bool cache_images = true;

  void validate() const;
};

// YAML keys mirror the field names; `weights` is a map {lambda, w1, w2} and
// `load_size` a two-element list. Unknown keys are rejected.
TrainConfig load_train_config(const std::filesystem::path& path);
TrainConfig parse_train_config(const std::string& yaml_text);
nlohmann::json config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const nlohmann::json& j);
// Hash of every field that changes what a training step computes; paths and
// epoch counts are excluded so runs can be extended or relocated.
std::uint64_t config_hash(const TrainConfig& cfg);

ArchSpec homography_arch(const TrainConfig& cfg);
ArchSpec attention_arch(const TrainConfig& cfg);
ArchSpec merge_arch(const TrainConfig& cfg);
ArchSpec discriminator_arch(const TrainConfig& cfg);
ArchSpec phi_arch(const TrainConfig& cfg);

// Deterministic per-network initialisation stream.
std::mt19937_64 network_rng(std::uint64_t seed, NetworkKind kind);
NetworkParams<float> make_feature_extractor(const TrainConfig& cfg);

class MetricsLog {
 public:
  struct Record {
    std::int64_t step;
    int epoch;
    std::string name;
    double value;
    double wall_ms;
  };

  MetricsLog();
  explicit MetricsLog(const std::filesystem::path& path, bool append = false);

  void log(std::int64_t step, int epoch, const std::string& name, double value);
  const std::vector<Record>& records() const noexcept { return records_; }
  std::vector<double> values(const std::string& name) const;

 private:
  std::chrono::steady_clock::time_point start_;
  std::unique_ptr<std::ofstream> out_;
  std::vector<Record> records_;
};

struct ImagePair {
  std::string scene_id;
  ImageBuffer under;
  ImageBuffer over;
  ImageBuffer reference;
};

// Pairs from a manifest, decoded lazily and optionally cached.
class PairDataset {
 public:
  PairDataset() = default;
  PairDataset(std::vector<ManifestEntry> entries, Size load_size, bool cache = true);
  static PairDataset from_pairs(std::vector<ImagePair> pairs);

  std::size_t size() const noexcept { return count_; }
  bool empty() const noexcept { return count_ == 0; }
  std::shared_ptr<const ImagePair> get(std::size_t index) const;

 private:
  std::vector<ManifestEntry> entries_;
  Size load_size_{};
  bool cache_ = true;
  std::size_t count_ = 0;
  mutable std::vector<std::shared_ptr<const ImagePair>> slots_;
};

// Sample `index` of a stream: picks a pair uniformly, then crops and perturbs.
TrainingSample draw_sample(const PairDataset& data, std::uint64_t seed, std::uint64_t index,
                           double max_disturbance, int patch_size);

std::vector<TrainingSample> make_test_samples(const PairDataset& data, std::uint64_t seed, int count,
                                              double max_disturbance, int patch_size);

// Stacks per-sample (1, C, H, W) tensors into (N, C, H, W).
template <typename T>
Tensor<T> concat_batch(const std::vector<Tensor<T>>& parts);

// Predicts offsets that warp `over` onto `under`, expressed at their size.
using OffsetPredictor = std::function<CornerOffsets(const ImageBuffer& under, const ImageBuffer& over)>;

// Resizes to the network input, predicts and rescales back.
OffsetPredictor homography_predictor(const NetworkParams<float>& nh);

struct AlignmentReport {
  int pairs = 0;
  double threshold_px = 0.0;
  double success_rate = 0.0;
  double mean_error = 0.0;
  double median_error = 0.0;
  // Mean corner error of predicting zero offsets.
  double baseline_error = 0.0;
  double xor_before = 0.0;
  double xor_after = 0.0;
  std::vector<double> errors;
};

AlignmentReport evaluate_alignment(const OffsetPredictor& predict, const std::vector<TrainingSample>& samples,
                                   double threshold_px);
AlignmentReport evaluate_alignment(const NetworkParams<float>& nh, const std::vector<TrainingSample>& samples,
                                   double threshold_px);

// Trainer state shared by both stages.
struct TrainerState {
  int stage = 0;
  int epoch = 0;
  std::int64_t step = 0;
  std::uint64_t next_sample = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
};

nlohmann::json state_to_json(const TrainerState& state);
TrainerState state_from_json(const nlohmann::json& j);

template <typename T>
void save_adam(const std::filesystem::path& path, const Adam<T>& adam);
template <typename T>
void load_adam(const std::filesystem::path& path, Adam<T>& adam);

class HomographyTrainer {
 public:
  HomographyTrainer(TrainConfig cfg, const PairDataset& train);

  // One optimisation step on the next batch; returns the batch loss.
  double step();
  // Forward-only loss of the batch starting at `first_sample`.
  double batch_loss(std::uint64_t first_sample) const;

  NetworkParams<float>& params() noexcept { return params_; }
  const NetworkParams<float>& params() const noexcept { return params_; }
  TrainerState& state() noexcept { return state_; }
  const TrainerState& state() const noexcept { return state_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  std::size_t train_pairs() const noexcept { return train_->size(); }

  void save(const std::filesystem::path& dir) const;
  // CheckpointMismatch when the stored config hash or architecture differs.
  void restore(const std::filesystem::path& dir);

 private:
  void build_batch(std::uint64_t first_sample, Tensor<float>& input, Tensor<float>& target) const;

  TrainConfig cfg_;
  const PairDataset* train_;
  NetworkParams<float> params_;
  std::unique_ptr<Adam<float>> adam_;
  TrainerState state_;
};

struct FusionBatch {
  Tensor<float> i1;
  Tensor<float> i2w;
  Tensor<float> reference;
};

struct FusionLosses {
  double feat = 0.0;
  double adv = 0.0;
  double d = 0.0;
  double g = 0.0;
  bool d_updated = false;
};

class FusionTrainer {
 public:
  FusionTrainer(TrainConfig cfg, const PairDataset& train, NetworkParams<float> homography,
                NetworkParams<float> phi);

  FusionLosses step();

  FusionBatch make_batch(std::uint64_t first_sample) const;
  // Generator loss and gradients (attention params then merge params) for a
  // batch, without touching optimiser state or the discriminator.
  std::pair<double, std::vector<Tensor<float>>> generator_gradients(const FusionBatch& batch);
  // Perceptual loss of the current generator on a batch, no gradients.
  double feature_loss(const FusionBatch& batch) const;

  NetworkParams<float>& attention() noexcept { return attention_; }
  NetworkParams<float>& merge() noexcept { return merge_; }
  NetworkParams<float>& discriminator() noexcept { return discriminator_; }
  const NetworkParams<float>& homography() const noexcept { return homography_; }
  const NetworkParams<float>& phi() const noexcept { return phi_; }
  TrainerState& state() noexcept { return state_; }
  const TrainerState& state() const noexcept { return state_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  std::size_t train_pairs() const noexcept { return train_->size(); }

  void save(const std::filesystem::path& dir) const;
  void restore(const std::filesystem::path& dir);

 private:
  std::vector<ag::Var<float>> generator_vars() const;

  TrainConfig cfg_;
  const PairDataset* train_;
  NetworkParams<float> homography_;
  NetworkParams<float> phi_;
  NetworkParams<float> attention_;
  NetworkParams<float> merge_;
  NetworkParams<float> discriminator_;
  std::unique_ptr<Adam<float>> adam_g_;
  std::unique_ptr<Adam<float>> adam_d_;
  TrainerState state_;
};

struct Stage1Result {
  NetworkParams<float> homography;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_val_error;
  AlignmentReport final_val;
};

struct Stage2Result {
  NetworkParams<float> attention;
  NetworkParams<float> merge;
  NetworkParams<float> discriminator;
  std::vector<FusionLosses> steps;
  std::vector<double> epoch_val_feat;
  // Share of second-half steps whose D loss lies in [d_band_low, d_band_high].
  double d_band_fraction = 0.0;
};

// Both throw DataUnavailable for an empty training split and NonFiniteLoss
// on the first non-finite loss. `resume` restores from cfg.checkpoint_dir.
Stage1Result train_stage1(const TrainConfig& cfg, const std::vector<ManifestEntry>& manifest, MetricsLog& log,
                          bool resume = false);
Stage2Result train_stage2(const TrainConfig& cfg, const std::vector<ManifestEntry>& manifest,
                          const std::filesystem::path& homography_ckpt, MetricsLog& log, bool resume = false);

// Lower-level drivers over an existing dataset.
Stage1Result run_stage1(HomographyTrainer& trainer, const PairDataset& val, MetricsLog& log);
Stage2Result run_stage2(FusionTrainer& trainer, const PairDataset& val, MetricsLog& log);

// Loads the homography parameters from a stage-1 checkpoint directory or a
// single archive file.
NetworkParams<float> load_homography_checkpoint(const std::filesystem::path& path);

}  // namespace fuselite
