#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "fuselite/archive.hpp"
#include "fuselite/cli.hpp"
#include "fuselite/dataio.hpp"
#include "fuselite/quality.hpp"
#include "fuselite/synthetic.hpp"
#include "fuselite/training.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fuselite {
namespace {

using testing::TempDir;

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

// Homography parameters whose output ignores the input: fc2 weight zero, bias = offsets.
NetworkParams<float> constant_homography(const CornerOffsets& at_input) {
  ArchSpec a;
  a.kind = NetworkKind::homography;
  a.input_size = 64;
  std::mt19937_64 rng(1);
  NetworkParams<float> p = init_params<float>(a, rng);
  auto& w = p.get("fc2.weight").mutable_value();
  std::fill(w.values().begin(), w.values().end(), 0.0f);
  auto& b = p.get("fc2.bias").mutable_value();
  const auto flat = at_input.flat();
  for (int i = 0; i < 8; ++i) {
    b[static_cast<std::size_t>(i)] = static_cast<float>(flat[static_cast<std::size_t>(i)]);
  }
  return p;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    models_ = dir_ / "models";
    fs::create_directories(models_);
    std::mt19937_64 rng(3);
    ArchSpec att;
    att.kind = NetworkKind::attention;
    att.width = 4;
    ArchSpec mer;
    mer.kind = NetworkKind::merge;
    mer.width = 4;
    mer.depth = 2;
    save_params(models_ / "attention.flarch", init_params<float>(att, rng));
    save_params(models_ / "merge.flarch", init_params<float>(mer, rng));
    save_params(models_ / "homography.flarch", constant_homography(CornerOffsets{{}, {}, {64, 64}}));

    std::mt19937_64 scene(4);
    radiance_ = render_radiance(scene, {128, 96});
    under_ = dir_ / "under.png";
    over_ = dir_ / "over.png";
    write_image(under_, expose(radiance_, -1.0));
    write_image(over_, expose(radiance_, 1.0));
  }

  TempDir dir_{"cli"};
  fs::path models_, under_, over_;
  ImageBuffer radiance_;
};

TEST_F(CliTest, UsageErrorsAndHelp) {
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"--help"}).code, kExitOk);
  const CliResult v = run({"--version"});
  EXPECT_EQ(v.code, kExitOk);
  EXPECT_NE(v.out.find(kToolVersion), std::string::npos);
  EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
  const CliResult missing = run({"align", "--under", under_.string(), "--over", over_.string(), "--out",
                                 (dir_ / "a.png").string()});
  EXPECT_EQ(missing.code, kExitUsage);
  EXPECT_NE(missing.err.find("--ckpt"), std::string::npos);
  EXPECT_EQ(run({"fuse", "--under", under_.string(), "--over", over_.string(), "--ckpt-dir", models_.string(),
                 "--out", (dir_ / "f.png").string(), "--bit-depth", "12"})
                .code,
            kExitUsage);
}

TEST_F(CliTest, MakeScenesAndManifest) {
  const fs::path root = dir_ / "data";
  ASSERT_EQ(run({"make-scenes", "--out", root.string(), "--scenes", "3", "--exposures", "2", "--size", "96x64",
                 "--seed", "2"})
                .code,
            kExitOk);
  EXPECT_TRUE(fs::exists(root / "run_manifest.json"));
  EXPECT_EQ(run({"make-scenes", "--out", root.string(), "--scenes", "3"}).code, kExitFailure);

  const fs::path manifest = dir_ / "m.jsonl";
  ASSERT_EQ(run({"synth-data", "--data-root", root.string(), "--out", manifest.string(), "--load-size", "96x64",
                 "--val-scenes", "1"})
                .code,
            kExitOk);
  const auto entries = read_manifest(manifest);
  EXPECT_EQ(entries.size(), 3u);  // one pair per two-exposure stack
  EXPECT_EQ(filter_split(entries, "val").size(), 1u);
  const json rm = read_json(manifest.string() + ".run.json");
  EXPECT_EQ(rm["command"], "synth-data");
  for (const char* key : {"argv", "config", "inputs", "outputs", "seed", "tool_version", "started_at", "wall_seconds"}) {
    EXPECT_TRUE(rm.contains(key)) << key;
  }

  EXPECT_EQ(run({"synth-data", "--data-root", root.string(), "--out", manifest.string()}).code, kExitFailure);
  ::setenv(kDataRootEnv, root.string().c_str(), 1);
  EXPECT_EQ(run({"synth-data", "--out", manifest.string(), "--load-size", "96x64", "--force"}).code, kExitOk);
  ::unsetenv(kDataRootEnv);
  EXPECT_EQ(read_manifest(manifest).size(), 3u);
}

TEST_F(CliTest, AlignWithZeroModelIsIdentity) {
  const fs::path out = dir_ / "aligned.png", h = dir_ / "h.json", vis = dir_ / "xor.png";
  const CliResult r = run({"align", "--under", over_.string(), "--over", over_.string(), "--ckpt",
                           (models_ / "homography.flarch").string(), "--out", out.string(), "--dump-h", h.string(),
                           "--xor-vis", vis.string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(read_image(out), read_image(over_));
  const json j = read_json(h);
  // The identity is recovered through a linear solve, so allow round-off.
  EXPECT_LT(j["xor_after"].get<double>(), 1e-3);
  EXPECT_TRUE(homography_from_json(j).m.isApprox(Eigen::Matrix3d::Identity(), 1e-9));
  EXPECT_TRUE(fs::exists(vis));
  EXPECT_TRUE(fs::exists(out.string() + ".run.json"));

  EXPECT_EQ(run({"align", "--under", over_.string(), "--over", over_.string(), "--ckpt",
                 (models_ / "homography.flarch").string(), "--out", out.string()})
                .code,
            kExitFailure);
}

TEST_F(CliTest, AlignRescalesOffsetsToImageSize) {
  CornerOffsets o{{1.0, -2.0, 0.5, 1.5}, {0.25, 1.0, -1.0, 2.0}, {64, 64}};
  save_params(dir_ / "const.flarch", constant_homography(o));
  const fs::path h = dir_ / "h.json";
  ASSERT_EQ(run({"align", "--under", under_.string(), "--over", over_.string(), "--ckpt",
                 (dir_ / "const.flarch").string(), "--out", (dir_ / "a.png").string(), "--dump-h", h.string()})
                .code,
            kExitOk);
  const CornerOffsets got = offsets_from_json(read_json(h)["offsets"]);
  EXPECT_EQ(got.patch_size, (Size{128, 96}));
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(got.du[i], o.du[i] * 2.0, 1e-5);
    EXPECT_NEAR(got.dv[i], o.dv[i] * 1.5, 1e-5);
  }
}

TEST_F(CliTest, FuseContracts) {
  const fs::path a = dir_ / "fa.png", b = dir_ / "fb.png";
  const std::vector<std::string> base{"fuse", "--under", under_.string(), "--over", over_.string(), "--ckpt-dir",
                                      models_.string(), "--out"};
  auto with = [&](const fs::path& out, std::vector<std::string> extra = {}) {
    std::vector<std::string> args = base;
    args.push_back(out.string());
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
  };
  ASSERT_EQ(with(a).code, kExitOk);
  ASSERT_EQ(with(b).code, kExitOk);
  const ImageBuffer fa = read_image(a);
  EXPECT_EQ(fa.size(), (Size{128, 96}));
  EXPECT_EQ(fa, read_image(b));
  const json rm = read_json(a.string() + ".run.json");
  EXPECT_EQ(rm["command"], "fuse");
  EXPECT_TRUE(rm["config"].contains("homography"));

  EXPECT_EQ(with(a).code, kExitFailure);
  EXPECT_EQ(with(a, {"--force", "--attention", "ones", "--bit-depth", "16"}).code, kExitOk);
  EXPECT_EQ(read_image(a).size(), (Size{128, 96}));
  EXPECT_EQ(with(dir_ / "fc.png", {"--attention", "sideways"}).code, kExitFailure);
  EXPECT_EQ(run({"fuse", "--under", under_.string(), "--over", over_.string(), "--ckpt-dir",
                 (dir_ / "nowhere").string(), "--out", (dir_ / "fd.png").string()})
                .code,
            kExitFailure);
}

TEST_F(CliTest, AlignedFusionMatchesNoAlignOnRestoredPair) {
  // Misalign `over` by a known homography, then let a regressor that always
  // predicts that homography undo it.
  const CornerOffsets at_input{{0.5, -0.5, 0.5, -0.25}, {0.25, 0.5, -0.5, 0.5}, {64, 64}};
  save_params(dir_ / "const.flarch", constant_homography(at_input));
  const CornerOffsets native = rescale_offsets(at_input, {64, 64}, {128, 96});
  const ImageBuffer over = read_image(over_);
  const fs::path shifted = dir_ / "shifted.png";
  write_image(shifted, warp_image(over, offsets_to_matrix(native).inverse(), over.size()).image, 16);

  const fs::path ref = dir_ / "ref.png", restored = dir_ / "restored.png";
  ASSERT_EQ(run({"fuse", "--under", under_.string(), "--over", over_.string(), "--ckpt-dir", models_.string(),
                 "--no-align", "--out", ref.string()})
                .code,
            kExitOk);
  ASSERT_EQ(run({"fuse", "--under", under_.string(), "--over", shifted.string(), "--ckpt-dir", models_.string(),
                 "--h-ckpt", (dir_ / "const.flarch").string(), "--out", restored.string()})
                .code,
            kExitOk);
  EXPECT_GT(psnr(read_image(ref), read_image(restored)), 30.0);
}

TEST_F(CliTest, EvalFuseSelfComparison) {
  const fs::path out = dir_ / "self.json";
  const CliResult r = run({"eval-fuse", "--pred", under_.string(), "--reference", under_.string(), "--out",
                           out.string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const json j = read_json(out);
  EXPECT_EQ(j["psnr"].get<double>(), kPsnrCap);
  EXPECT_NEAR(j["ssim"].get<double>(), 1.0, 1e-12);
  EXPECT_EQ(run({"eval-fuse", "--pred", under_.string()}).code, kExitFailure);
  EXPECT_EQ(run({"eval-fuse"}).code, kExitUsage);
}

TEST_F(CliTest, EvalFuseReportsEveryMode) {
  const fs::path root = dir_ / "data";
  SyntheticDatasetOptions opts;
  opts.scenes = 2;
  opts.exposures = 2;
  opts.size = {64, 48};
  write_synthetic_dataset(root, opts);
  const fs::path report = dir_ / "report.json", metrics = dir_ / "metrics.jsonl";
  const CliResult r = run({"eval-fuse", "--ckpt-dir", models_.string(), "--data-root", root.string(),
                           "--load-size", "64x48", "--perturb", "2", "--out", report.string(), "--metrics",
                           metrics.string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  for (const char* mode : {"full", "no-align", "attention-ones"}) {
    EXPECT_NE(r.out.find(mode), std::string::npos) << mode;
  }
  const json j = read_json(report);
  EXPECT_EQ(j["pairs"], 2);
  EXPECT_EQ(j["summary"].size(), 3u);
  EXPECT_EQ(j["per_pair"].size(), 2u);
  std::ifstream in(metrics);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 2 * 3 * 3);
  EXPECT_EQ(run({"eval-fuse", "--ckpt-dir", models_.string(), "--data-root", root.string(), "--modes", "bogus"}).code,
            kExitFailure);
}

TEST_F(CliTest, TrainingCommandsEndToEnd) {
  const fs::path root = dir_ / "data";
  SyntheticDatasetOptions opts;
  opts.scenes = 3;
  opts.exposures = 2;
  opts.size = {96, 96};
  write_synthetic_dataset(root, opts);
  const fs::path manifest = dir_ / "m.jsonl";
  ASSERT_EQ(run({"synth-data", "--data-root", root.string(), "--out", manifest.string(), "--load-size", "96x96",
                 "--val-scenes", "1"})
                .code,
            kExitOk);
  const fs::path cfg = dir_ / "tiny.yaml";
  std::ofstream(cfg) << "batch_size: 2\npatch_size: 64\nmax_disturbance: 4\nload_size: [96, 96]\n"
                        "val_samples: 4\nfusion_patch_size: 32\nattention_width: 4\nmerge_depth: 2\n"
                        "discriminator_width: 4\nphi_width: 4\n";

  const fs::path h = dir_ / "h";
  CliResult r = run({"train-h", "--config", cfg.string(), "--manifest", manifest.string(), "--ckpt-dir", h.string(),
                     "--epochs", "1", "--iterations", "2"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  for (const char* f : {"homography.flarch", "homography.adam.flarch", "trainer.json", "metrics.jsonl"}) {
    EXPECT_TRUE(fs::exists(h / f)) << f;
  }
  EXPECT_EQ(read_json(h / "trainer.json")["state"]["step"], 2);
  EXPECT_EQ(run({"train-h", "--config", cfg.string(), "--manifest", manifest.string(), "--ckpt-dir", h.string(),
                 "--epochs", "1"})
                .code,
            kExitFailure);
  r = run({"train-h", "--config", cfg.string(), "--manifest", manifest.string(), "--ckpt-dir", h.string(),
           "--epochs", "2", "--iterations", "2", "--resume"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(read_json(h / "trainer.json")["state"]["step"], 4);

  const fs::path ea = dir_ / "align.json";
  r = run({"eval-align", "--h-ckpt", h.string(), "--manifest", manifest.string(), "--load-size", "96x96",
           "--samples", "4", "--max-disturbance", "4", "--patch-size", "64", "--compare-untrained", "--out",
           ea.string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const json rep = read_json(ea);
  EXPECT_TRUE(rep.contains("trained"));
  EXPECT_TRUE(rep.contains("untrained"));

  const fs::path f = dir_ / "f";
  r = run({"train-fusion", "--config", cfg.string(), "--manifest", manifest.string(), "--ckpt-dir", f.string(),
           "--h-ckpt", h.string(), "--epochs", "1", "--iterations", "2"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  for (const char* name : {"attention.flarch", "merge.flarch", "discriminator.flarch", "homography.flarch",
                           "trainer.json"}) {
    EXPECT_TRUE(fs::exists(f / name)) << name;
  }
  r = run({"fuse", "--under", under_.string(), "--over", over_.string(), "--ckpt-dir", f.string(), "--out",
           (dir_ / "trained_fuse.png").string()});
  EXPECT_EQ(r.code, kExitOk) << r.err;
}

}  // namespace
}  // namespace fuselite
