#pragma once

// Exposure-stack loading, under/over pairing and synthetic training samples.
//
// On-disk layout:
//   <root>/<scene_id>/1.png ... N.png   (any order of exposures, png or jpg)
//   <root>/reference/<scene_id>.png     (one reference per scene)

#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fuselite/geometry.hpp"
#include "fuselite/image.hpp"

namespace fuselite {

inline constexpr Size kDefaultLoadSize{1200, 800};
inline constexpr double kDefaultMaxDisturbance = 32.0;

struct ExposureStack {
  std::string scene_id;
  // Ascending by mean luminance.
  std::vector<ImageBuffer> images;
  std::vector<std::filesystem::path> sources;
  std::vector<double> luminance;
  ImageBuffer reference;
  std::filesystem::path reference_path;
};

double mean_luminance(const ImageBuffer& image);

// Decodes every exposure of `scene_dir`, resizes to `size` and sorts by
// luminance. Throws MissingReference, DecodeError or TooFewImages.
ExposureStack load_stack(const std::filesystem::path& scene_dir, Size size = kDefaultLoadSize);

// Files `1.png`, `2.jpg`, ... of a scene directory, ordered by their number.
std::vector<std::filesystem::path> list_exposures(const std::filesystem::path& scene_dir);

std::filesystem::path find_reference(const std::filesystem::path& scene_dir);

// 1-indexed (i, N - i + 1) for i = 1 .. floor(N / 2); the middle exposure of an
// odd stack is left out.
std::vector<std::pair<int, int>> enumerate_pairs(int count);
inline std::vector<std::pair<int, int>> enumerate_pairs(const ExposureStack& stack) {
  return enumerate_pairs(static_cast<int>(stack.images.size()));
}

struct TrainingSample {
  ImageBuffer under_patch;
  ImageBuffer over_patch_warped;
  CornerOffsets gt_offsets;
  ImageBuffer reference_patch;
  // Unperturbed crop of the over image at the same location.
  ImageBuffer over_patch_aligned;
  int origin_x = 0;
  int origin_y = 0;
};

// Crops a patch at a uniformly drawn location that keeps every displaced
// corner inside the image and perturbs the over crop so that warping it by
// offsets_to_matrix(gt_offsets) re-aligns it with the under crop.
// `max_disturbance` may be 0 (identity). Throws ImageTooSmall.
TrainingSample make_training_sample(const ImageBuffer& under, const ImageBuffer& over,
                                    const ImageBuffer& reference, std::mt19937_64& rng,
                                    double max_disturbance = kDefaultMaxDisturbance,
                                    int patch_size = 256);

// Independent stream for sample `index` of a run seeded with `base_seed`.
std::mt19937_64 sample_rng(std::uint64_t base_seed, std::uint64_t index);

struct ManifestEntry {
  std::string scene_id;
  std::filesystem::path under;
  std::filesystem::path over;
  std::filesystem::path reference;
  double under_luminance = 0.0;
  double over_luminance = 0.0;
  int under_rank = 0;  // 1-indexed position in the luminance order
  int over_rank = 0;
  std::string split = "train";

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct ManifestOptions {
  Size load_size = kDefaultLoadSize;
  // The last `val_scenes` scenes (by id) form the validation split.
  int val_scenes = 0;
};

std::vector<std::string> list_scenes(const std::filesystem::path& root);

std::vector<ManifestEntry> build_manifest(const std::filesystem::path& root,
                                          const ManifestOptions& options = {});

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

std::vector<ManifestEntry> filter_split(const std::vector<ManifestEntry>& entries,
                                        const std::string& split);

}  // namespace fuselite
