#include "fuselite/dataio.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

#include "fuselite/mtb.hpp"

namespace fs = std::filesystem;

namespace fuselite {

namespace {

bool is_image_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

bool is_number(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

}  // namespace

double mean_luminance(const ImageBuffer& image) {
  const GrayImage gray = to_grayscale(image);
  if (gray.values.empty()) {
    return 0.0;
  }
  return std::accumulate(gray.values.begin(), gray.values.end(), 0.0) /
         static_cast<double>(gray.values.size());
}

std::vector<fs::path> list_exposures(const fs::path& scene_dir) {
  std::vector<std::pair<long, fs::path>> numbered;
  if (fs::is_directory(scene_dir)) {
    for (const auto& entry : fs::directory_iterator(scene_dir)) {
      const fs::path& p = entry.path();
      if (entry.is_regular_file() && is_image_extension(p) && is_number(p.stem().string())) {
        numbered.emplace_back(std::stol(p.stem().string()), p);
      }
    }
  }
  std::sort(numbered.begin(), numbered.end());
  std::vector<fs::path> out;
  out.reserve(numbered.size());
  for (auto& [index, path] : numbered) {
    out.push_back(std::move(path));
  }
  return out;
}

fs::path find_reference(const fs::path& scene_dir) {
  const fs::path dir = fs::absolute(scene_dir).lexically_normal();
  const std::string scene_id = dir.has_filename() ? dir.filename().string() : dir.parent_path().filename().string();
  const fs::path root = dir.has_filename() ? dir.parent_path() : dir.parent_path().parent_path();
  for (const char* ext : {".png", ".PNG", ".jpg", ".JPG", ".jpeg"}) {
    const fs::path candidate = root / "reference" / (scene_id + ext);
    if (fs::is_regular_file(candidate)) {
      return candidate;
    }
  }
  fail(ErrorCode::MissingReference, "no reference image for scene " + scene_id);
}

ExposureStack load_stack(const fs::path& scene_dir, Size size) {
  ExposureStack stack;
  const fs::path dir = fs::absolute(scene_dir).lexically_normal();
  stack.scene_id = dir.has_filename() ? dir.filename().string() : dir.parent_path().filename().string();
  stack.reference_path = find_reference(dir);

  const auto files = list_exposures(dir);
  require(files.size() >= 2, ErrorCode::TooFewImages,
          "scene " + stack.scene_id + " has " + std::to_string(files.size()) + " exposures");

  std::vector<ImageBuffer> images;
  std::vector<double> lum;
  for (const auto& f : files) {
    images.push_back(resize_image(read_image(f), size));
    lum.push_back(mean_luminance(images.back()));
  }
  std::vector<std::size_t> order(files.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return lum[a] < lum[b]; });
  for (std::size_t i : order) {
    stack.images.push_back(std::move(images[i]));
    stack.sources.push_back(files[i]);
    stack.luminance.push_back(lum[i]);
  }
  stack.reference = resize_image(read_image(stack.reference_path), size);
  for (std::size_t i = 1; i < stack.luminance.size(); ++i) {
    require(stack.luminance[i - 1] <= stack.luminance[i], ErrorCode::DecodeError,
            "luminance order violated after sort");
  }
  return stack;
}

std::vector<std::pair<int, int>> enumerate_pairs(int count) {
  require(count >= 2, ErrorCode::TooFewImages, "pairing needs at least two exposures");
  std::vector<std::pair<int, int>> pairs;
  for (int i = 1; i <= count / 2; ++i) {
    pairs.emplace_back(i, count - i + 1);
  }
  return pairs;
}

std::mt19937_64 sample_rng(std::uint64_t base_seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(base_seed), static_cast<std::uint32_t>(base_seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

TrainingSample make_training_sample(const ImageBuffer& under, const ImageBuffer& over,
                                    const ImageBuffer& reference, std::mt19937_64& rng,
                                    double max_disturbance, int patch_size) {
  require(under.size() == over.size() && under.size() == reference.size(), ErrorCode::DimensionMismatch,
          "under, over and reference must share dimensions");
  require(max_disturbance >= 0.0 && patch_size > 0, ErrorCode::InvalidArgument,
          "invalid sample parameters");
  const double margin = max_disturbance;
  require(under.width() >= patch_size + 2.0 * margin && under.height() >= patch_size + 2.0 * margin,
          ErrorCode::ImageTooSmall,
          "image " + std::to_string(under.width()) + "x" + std::to_string(under.height()) +
              " cannot hold a " + std::to_string(patch_size) + " patch with disturbance " +
              std::to_string(max_disturbance));

  const int lo = static_cast<int>(std::ceil(margin));
  const int hi_x = static_cast<int>(std::floor(under.width() - patch_size - margin));
  const int hi_y = static_cast<int>(std::floor(under.height() - patch_size - margin));
  std::uniform_int_distribution<int> pick_x(lo, std::max(lo, hi_x));
  std::uniform_int_distribution<int> pick_y(lo, std::max(lo, hi_y));

  TrainingSample s;
  s.origin_x = pick_x(rng);
  s.origin_y = pick_y(rng);
  const Size patch{patch_size, patch_size};
  if (max_disturbance > 0.0) {
    s.gt_offsets = sample_random_offsets(rng, patch, max_disturbance);
  } else {
    s.gt_offsets = CornerOffsets{};
    s.gt_offsets.patch_size = patch;
  }

  s.under_patch = crop(under, s.origin_x, s.origin_y, patch_size, patch_size);
  s.reference_patch = crop(reference, s.origin_x, s.origin_y, patch_size, patch_size);
  s.over_patch_aligned = crop(over, s.origin_x, s.origin_y, patch_size, patch_size);

  // over_patch_warped(q) = over(origin + H q): warp `over` by (T(origin) H)^-1.
  const HomographyMatrix to_global =
      HomographyMatrix::translation(s.origin_x, s.origin_y) * offsets_to_matrix(s.gt_offsets);
  s.over_patch_warped = max_disturbance > 0.0 ? warp_image(over, to_global.inverse(), patch).image
                                              : s.over_patch_aligned;
  return s;
}

std::vector<std::string> list_scenes(const fs::path& root) {
  require(fs::is_directory(root), ErrorCode::DataUnavailable, "data root " + root.string() + " is not a directory");
  std::vector<std::string> scenes;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && entry.path().filename() != "reference") {
      scenes.push_back(entry.path().filename().string());
    }
  }
  std::sort(scenes.begin(), scenes.end());
  return scenes;
}

std::vector<ManifestEntry> build_manifest(const fs::path& root, const ManifestOptions& options) {
  const auto scenes = list_scenes(root);
  require(!scenes.empty(), ErrorCode::DataUnavailable, "no scenes under " + root.string());
  std::vector<ManifestEntry> entries;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const ExposureStack stack = load_stack(root / scenes[s], options.load_size);
    const bool val = static_cast<int>(scenes.size() - s) <= options.val_scenes;
    for (const auto& [i, j] : enumerate_pairs(stack)) {
      ManifestEntry e;
      e.scene_id = stack.scene_id;
      e.under = stack.sources[static_cast<std::size_t>(i - 1)];
      e.over = stack.sources[static_cast<std::size_t>(j - 1)];
      e.reference = stack.reference_path;
      e.under_luminance = stack.luminance[static_cast<std::size_t>(i - 1)];
      e.over_luminance = stack.luminance[static_cast<std::size_t>(j - 1)];
      e.under_rank = i;
      e.over_rank = j;
      e.split = val ? "val" : "train";
      entries.push_back(std::move(e));
    }
  }
  return entries;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    require(static_cast<bool>(out), ErrorCode::IoError, "cannot write " + tmp.string());
    for (const auto& e : entries) {
      nlohmann::json j{{"scene_id", e.scene_id},
                       {"under", e.under.string()},
                       {"over", e.over.string()},
                       {"reference", e.reference.string()},
                       {"under_luminance", e.under_luminance},
                       {"over_luminance", e.over_luminance},
                       {"under_rank", e.under_rank},
                       {"over_rank", e.over_rank},
                       {"split", e.split}};
      out << j.dump() << '\n';
    }
  }
  fs::rename(tmp, path);
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::DataUnavailable, "cannot open manifest " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    const auto j = nlohmann::json::parse(line);
    ManifestEntry e;
    e.scene_id = j.at("scene_id").get<std::string>();
    e.under = j.at("under").get<std::string>();
    e.over = j.at("over").get<std::string>();
    e.reference = j.at("reference").get<std::string>();
    e.under_luminance = j.value("under_luminance", 0.0);
    e.over_luminance = j.value("over_luminance", 0.0);
    e.under_rank = j.value("under_rank", 0);
    e.over_rank = j.value("over_rank", 0);
    e.split = j.value("split", std::string("train"));
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<ManifestEntry> filter_split(const std::vector<ManifestEntry>& entries, const std::string& split) {
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
               [&](const ManifestEntry& e) { return e.split == split; });
  return out;
}

}  // namespace fuselite
