#pragma once

// Procedural exposure stacks written in the same directory layout as real
// captures. Used for desk-scale training runs, demos and tests.

#include <filesystem>
#include <random>
#include <vector>

#include "fuselite/image.hpp"

namespace fuselite {

// Linear-radiance scene with a wide dynamic range: shaded background,
// random bright/dark shapes and multiplicative texture.
ImageBuffer render_radiance(std::mt19937_64& rng, Size size);

// Camera model: clip((radiance * 2^ev)^(1/2.2)).
ImageBuffer expose(const ImageBuffer& radiance, double ev);

// Global tone curve used as the "ground truth" fusion target.
ImageBuffer tone_map_reference(const ImageBuffer& radiance);

struct SyntheticDatasetOptions {
  int scenes = 4;
  int exposures = 3;
  Size size{320, 240};
  // Exposure values relative to a mid-grey log-average.
  double min_ev = -2.0;
  double max_ev = 2.0;
  std::uint64_t seed = 1;
};

// Writes <root>/scene_XXX/{1..N}.png (exposures in shuffled order) and
// <root>/reference/scene_XXX.png. Returns the scene ids.
std::vector<std::string> write_synthetic_dataset(const std::filesystem::path& root,
                                                 const SyntheticDatasetOptions& options);

}  // namespace fuselite
