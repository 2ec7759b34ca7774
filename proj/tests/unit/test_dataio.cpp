#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "fuselite/dataio.hpp"
#include "fuselite/error.hpp"
#include "fuselite/synthetic.hpp"
#include "support.hpp"

namespace fs = std::filesystem;

namespace fuselite {
namespace {

using testing::random_image;
using testing::TempDir;

ErrorCode code_of(const auto& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::InvalidArgument;
}

ImageBuffer flat_image(int w, int h, double v) { return ImageBuffer(w, h, v); }

// Scene with `n` flat exposures written as 1.png..n.png in the given brightness order.
void write_scene(const fs::path& root, const std::string& id, const std::vector<double>& levels,
                 bool with_reference = true) {
  fs::create_directories(root / id);
  for (std::size_t i = 0; i < levels.size(); ++i) {
    write_image(root / id / (std::to_string(i + 1) + ".png"), flat_image(48, 32, levels[i]));
  }
  if (with_reference) {
    fs::create_directories(root / "reference");
    write_image(root / "reference" / (id + ".png"), flat_image(48, 32, 0.5));
  }
}

TEST(Pairs, OuterToInner) {
  using P = std::vector<std::pair<int, int>>;
  EXPECT_EQ(enumerate_pairs(2), (P{{1, 2}}));
  EXPECT_EQ(enumerate_pairs(3), (P{{1, 3}}));
  EXPECT_EQ(enumerate_pairs(6), (P{{1, 6}, {2, 5}, {3, 4}}));
  EXPECT_EQ(enumerate_pairs(7), (P{{1, 7}, {2, 6}, {3, 5}}));
  EXPECT_EQ(code_of([] { enumerate_pairs(1); }), ErrorCode::TooFewImages);
}

TEST(Stack, SortsByLuminance) {
  TempDir dir("stack");
  write_scene(dir.path(), "s1", {0.8, 0.1, 0.5});
  const ExposureStack st = load_stack(dir / "s1", {24, 16});
  ASSERT_EQ(st.images.size(), 3u);
  EXPECT_LT(st.luminance[0], st.luminance[1]);
  EXPECT_LT(st.luminance[1], st.luminance[2]);
  EXPECT_EQ(st.sources[0].filename(), "2.png");
  EXPECT_EQ(st.sources[2].filename(), "1.png");
  EXPECT_EQ(st.images[0].size(), (Size{24, 16}));
  EXPECT_EQ(st.reference.size(), (Size{24, 16}));
  EXPECT_EQ(st.scene_id, "s1");
}

TEST(Stack, ExposuresOrderedNumerically) {
  TempDir dir("order");
  write_scene(dir.path(), "s", std::vector<double>(11, 0.5));
  const auto files = list_exposures(dir / "s");
  ASSERT_EQ(files.size(), 11u);
  EXPECT_EQ(files[1].filename(), "2.png");
  EXPECT_EQ(files[10].filename(), "11.png");
}

TEST(Stack, ErrorContracts) {
  TempDir dir("errors");
  write_scene(dir.path(), "noref", {0.2, 0.7}, false);
  EXPECT_EQ(code_of([&] { load_stack(dir / "noref"); }), ErrorCode::MissingReference);

  write_scene(dir.path(), "single", {0.4});
  EXPECT_EQ(code_of([&] { load_stack(dir / "single"); }), ErrorCode::TooFewImages);

  write_scene(dir.path(), "corrupt", {0.2, 0.7});
  std::ofstream(dir / "corrupt" / "2.png") << "not an image";
  EXPECT_EQ(code_of([&] { load_stack(dir / "corrupt"); }), ErrorCode::DecodeError);
}

TEST(Manifest, TwoImageStackGivesOnePair) {
  TempDir dir("manifest2");
  write_scene(dir.path(), "a", {0.9, 0.2});
  const auto entries = build_manifest(dir.path(), {{48, 32}, 0});
  ASSERT_EQ(entries.size(), 1u);
  EXPECT_EQ(entries[0].under.filename(), "2.png");
  EXPECT_EQ(entries[0].over.filename(), "1.png");
  EXPECT_EQ(entries[0].under_rank, 1);
  EXPECT_EQ(entries[0].over_rank, 2);
  EXPECT_LT(entries[0].under_luminance, entries[0].over_luminance);
}

TEST(Manifest, SplitsAndRoundTrips) {
  TempDir dir("manifest");
  write_scene(dir.path(), "a", {0.1, 0.3, 0.5, 0.7});
  write_scene(dir.path(), "b", {0.2, 0.8});
  write_scene(dir.path(), "c", {0.2, 0.5, 0.8});
  const auto entries = build_manifest(dir.path(), {{48, 32}, 1});
  ASSERT_EQ(entries.size(), 4u);  // 2 + 1 + 1
  EXPECT_EQ(filter_split(entries, "train").size(), 3u);
  const auto val = filter_split(entries, "val");
  ASSERT_EQ(val.size(), 1u);
  EXPECT_EQ(val[0].scene_id, "c");

  write_manifest(dir / "m.jsonl", entries);
  EXPECT_EQ(read_manifest(dir / "m.jsonl"), entries);
}

TEST(Manifest, EmptyRootIsUnavailable) {
  TempDir dir("empty");
  EXPECT_EQ(code_of([&] { build_manifest(dir.path()); }), ErrorCode::DataUnavailable);
}

TEST(SampleRng, DeterministicAndIndexed) {
  auto a = sample_rng(5, 17);
  auto b = sample_rng(5, 17);
  auto c = sample_rng(5, 18);
  auto d = sample_rng(6, 17);
  const auto va = a();
  EXPECT_EQ(va, b());
  EXPECT_NE(va, c());
  EXPECT_NE(va, d());
}

// Linear ramp in continuous coordinates; bilinear sampling reproduces it exactly.
ImageBuffer ramp(int w, int h) {
  ImageBuffer img(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.at(x, y, c) = 0.1 + 0.002 * (x + 0.5) + 0.003 * (y + 0.5) + 0.01 * c;
      }
    }
  }
  return img;
}

TEST(Sample, WarpedPatchSamplesOverThroughHomography) {
  const ImageBuffer over = ramp(160, 120);
  std::mt19937_64 seed_rng(1);
  const ImageBuffer under = random_image(seed_rng, 160, 120);
  for (int trial = 0; trial < 10; ++trial) {
    auto rng = sample_rng(3, trial);
    const TrainingSample s = make_training_sample(under, over, under, rng, 8.0, 64);
    const HomographyMatrix h = offsets_to_matrix(s.gt_offsets);
    for (int y = 0; y < 64; y += 3) {
      for (int x = 0; x < 64; x += 3) {
        const Eigen::Vector2d p = h.apply({x + 0.5, y + 0.5});
        const double gx = s.origin_x + p.x();
        const double gy = s.origin_y + p.y();
        for (int c = 0; c < 3; ++c) {
          ASSERT_NEAR(s.over_patch_warped.at(x, y, c), 0.1 + 0.002 * gx + 0.003 * gy + 0.01 * c, 1e-9);
        }
      }
    }
  }
}

TEST(Sample, CornersStayInsideImage) {
  std::mt19937_64 img_rng(2);
  const ImageBuffer img = random_image(img_rng, 128, 96);
  for (int trial = 0; trial < 200; ++trial) {
    auto rng = sample_rng(9, trial);
    const TrainingSample s = make_training_sample(img, img, img, rng, 16.0, 64);
    const auto corners = patch_corners({64, 64});
    for (int i = 0; i < 4; ++i) {
      const double x = s.origin_x + corners[i].x() + s.gt_offsets.du[i];
      const double y = s.origin_y + corners[i].y() + s.gt_offsets.dv[i];
      ASSERT_GE(x, 0.0);
      ASSERT_LE(x, 128.0);
      ASSERT_GE(y, 0.0);
      ASSERT_LE(y, 96.0);
    }
  }
}

TEST(Sample, ZeroDisturbanceIsIdentity) {
  std::mt19937_64 img_rng(4);
  const ImageBuffer under = random_image(img_rng, 80, 70);
  const ImageBuffer over = random_image(img_rng, 80, 70);
  auto rng = sample_rng(1, 0);
  const TrainingSample s = make_training_sample(under, over, under, rng, 0.0, 64);
  EXPECT_EQ(s.over_patch_warped, s.over_patch_aligned);
  EXPECT_EQ(s.under_patch, crop(under, s.origin_x, s.origin_y, 64, 64));
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(s.gt_offsets.du[i], 0.0);
    EXPECT_EQ(s.gt_offsets.dv[i], 0.0);
  }
}

TEST(Sample, TooSmallImageThrows) {
  const ImageBuffer img(70, 70);
  auto rng = sample_rng(1, 0);
  EXPECT_EQ(code_of([&] { make_training_sample(img, img, img, rng, 8.0, 64); }), ErrorCode::ImageTooSmall);
}

TEST(Synthetic, WritesLoadableDeterministicStacks) {
  TempDir a("syn_a"), b("syn_b");
  SyntheticDatasetOptions opt;
  opt.scenes = 2;
  opt.exposures = 3;
  opt.size = {64, 48};
  opt.seed = 5;
  const auto ids = write_synthetic_dataset(a.path(), opt);
  write_synthetic_dataset(b.path(), opt);
  ASSERT_EQ(ids.size(), 2u);
  for (const auto& id : ids) {
    const ExposureStack sa = load_stack(a / id, opt.size);
    const ExposureStack sb = load_stack(b / id, opt.size);
    ASSERT_EQ(sa.images.size(), 3u);
    EXPECT_EQ(sa.images, sb.images);
    EXPECT_EQ(sa.reference, sb.reference);
    EXPECT_LT(sa.luminance.front() + 0.1, sa.luminance.back());
  }
}

TEST(ImageIo, SixteenBitRoundTrip) {
  TempDir dir("io");
  std::mt19937_64 rng(6);
  const ImageBuffer img = random_image(rng, 9, 7);
  write_image(dir / "x.png", img, 16);
  const ImageBuffer back = read_image(dir / "x.png");
  for (std::size_t i = 0; i < img.data().size(); ++i) {
    EXPECT_NEAR(back.data()[i], img.data()[i], 0.5 / 65535.0 + 1e-12);
  }
  write_image(dir / "y.png", img, 8);
  EXPECT_EQ(read_image(dir / "y.png"), quantize_8bit(img));
}

TEST(ImageIo, ReflectPadMirrorsWithoutRepeatingEdge) {
  ImageBuffer img(3, 1);
  img.at(0, 0, 0) = 1;
  img.at(1, 0, 0) = 2;
  img.at(2, 0, 0) = 3;
  const ImageBuffer p = reflect_pad(img, 2, 0);
  ASSERT_EQ(p.width(), 5);
  EXPECT_EQ(p.at(3, 0, 0), 2);
  EXPECT_EQ(p.at(4, 0, 0), 1);
}

}  // namespace
}  // namespace fuselite
