#pragma once

// Command-line front end and the inference pipeline it wraps.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

#include "fuselite/geometry.hpp"
#include "fuselite/nets.hpp"

namespace fuselite {

inline constexpr std::string_view kToolVersion = "fuselite 0.1.0";
inline constexpr const char* kDataRootEnv = "FUSELITE_DATA_ROOT";

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

struct FusionModels {
  NetworkParams<float> homography;  // may be empty when alignment is disabled
  NetworkParams<float> attention;
  NetworkParams<float> merge;
};

// Reads attention.flarch and merge.flarch from `ckpt_dir`; the homography
// archive comes from `homography_ckpt` when given, else from the same
// directory. `need_homography` false skips it entirely.
FusionModels load_fusion_models(const std::filesystem::path& ckpt_dir,
                                const std::filesystem::path& homography_ckpt, bool need_homography);

struct AlignOutput {
  CornerOffsets offsets;  // at the native size of the inputs
  HomographyMatrix h;     // warps `over` into the frame of `under`
  WarpResult warped;
};

AlignOutput align_pair(const NetworkParams<float>& nh, const ImageBuffer& under, const ImageBuffer& over);

struct FuseOptions {
  bool align = true;
  AttentionMode attention = AttentionMode::learned;
};

struct FuseOutput {
  ImageBuffer fused;
  ImageBuffer over_aligned;
  HomographyMatrix h;
};

// Reflection-pads to the merge network's size multiple, runs attention and
// merge without gradients and crops back to the input size.
FuseOutput fuse_pair(const FusionModels& models, const ImageBuffer& under, const ImageBuffer& over,
                     const FuseOptions& options = {});

// Atomic JSON write (temp file + rename).
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;
  std::string started_at;

  nlohmann::json to_json() const;
};

// Entry point; returns an ExitCode. Messages go to `out`, diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fuselite
