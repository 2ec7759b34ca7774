// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fuselite/archive.hpp"
#include "fuselite/cli.hpp"
#include "fuselite/dataio.hpp"
#include "fuselite/error.hpp"
#include "fuselite/geometry.hpp"
#include "fuselite/losses.hpp"
#include "fuselite/nets.hpp"
#include "fuselite/quality.hpp"
#include "fuselite/synthetic.hpp"
#include "fuselite/training.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace fuselite;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Options {
  // Stage-1 learning run; defaults fit the two-hour CPU allowance.
  int stage1_steps = 24000;
  double stage1_lr = 3e-4;
  int stage1_batch = 4;
  int stage1_report_every = 2000;
  int stage2_iterations = 500;
  fs::path work_dir;
  // Result lines are appended here as well; ctest hides stdout of passing tests.
  fs::path log;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ImageBuffer random_image(std::mt19937_64& rng, int w, int h) { return testing::random_image(rng, w, h); }

// 1. Geometry oracles.
Outcome geometry_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  double round_trip = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Size patch{256, 256};
    const CornerOffsets o = sample_random_offsets(rng, patch, 32.0);
    const CornerOffsets back = matrix_to_offsets(offsets_to_matrix(o), patch);
    for (int k = 0; k < 4; ++k) {
      round_trip = std::max({round_trip, std::abs(back.du[k] - o.du[k]), std::abs(back.dv[k] - o.dv[k])});
    }
  }

  double warp_err = 0.0;
  int validity_mismatch = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const ImageBuffer img = random_image(rng, 16, 16);
    const HomographyMatrix h = offsets_to_matrix(sample_random_offsets(rng, {16, 16}, 4.0));
    const WarpResult w = warp_image(img, h, {16, 16}, 0.0);
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) {
        const auto s = testing::oracle_sample(img, h.m, x + 0.5, y + 0.5);
        validity_mismatch += (w.validity.at(x, y) != 0) != s.valid;
        for (int c = 0; c < 3; ++c) {
          warp_err = std::max(warp_err, std::abs(w.image.at(x, y, c) - (s.valid ? s.rgb[c] : 0.0)));
        }
      }
    }
  }

  const ImageBuffer img = random_image(rng, 96, 64);
  const double id_psnr = psnr(img, warp_image(img, HomographyMatrix{}, img.size()).image);
  const double secs = seconds_since(t0);
  return {round_trip < 1e-9 && warp_err < 1e-6 && validity_mismatch == 0 && id_psnr > 50.0 && secs < 30.0,
          fmt("round-trip max err %.2e, warp vs oracle max err %.2e (%d validity mismatches), identity PSNR %.1f dB, "
              "%.1f s",
              round_trip, warp_err, validity_mismatch, id_psnr, secs)};
}

// 2. Loss values and gradients.
Outcome loss_suite() {
  using VD = ag::Var<double>;
  using TD = Tensor<double>;
  const auto t0 = std::chrono::steady_clock::now();
  double exact = 0.0;
  auto check = [&](double got, double want) { exact = std::max(exact, std::abs(got - want)); };

  ArchSpec phi_arch_small;
  phi_arch_small.kind = NetworkKind::feature_extractor;
  phi_arch_small.width = 2;
  std::mt19937_64 prng(5);
  const auto phi = init_params<double>(phi_arch_small, prng);
  LossWeights input_only;
  input_only.lambda.fill(0.0);
  input_only.lambda[0] = 1.0;
  check(perceptual_loss(ImageBuffer(16, 16, 0.0), ImageBuffer(16, 16, 1.0), phi, input_only), 1.0);
  check(perceptual_loss(ImageBuffer(16, 16, 0.3), ImageBuffer(16, 16, 0.3), phi, LossWeights{}), 0.0);

  const TD ones(Shape{1, 1, 4, 4}, 1.0), zeros(Shape{1, 1, 4, 4}, 0.0), half(Shape{1, 1, 4, 4}, 0.5);
  check(discriminator_loss(ones, zeros), 0.0);
  check(discriminator_loss(zeros, ones), 1.0);
  check(discriminator_loss(half, half), 0.25);
  check(adversarial_loss(ones), 0.0);
  check(adversarial_loss(zeros), 1.0);
  check(generator_loss(2.0, 3.0, LossWeights{}), 2.03);

  CornerOffsets a, b;
  b.du = {1, 1, 1, 1};
  b.dv = {3, 3, 3, 3};
  check(homography_loss(a, b), 5.0);
  check(homography_loss(b, b), 0.0);

  std::mt19937_64 rng(17);
  double worst = 0.0;
  auto fd = [&](VD& x, auto&& f) {
    x.zero_grad();
    f().backward();
    const TD analytic = x.grad();
    const TD numeric = testing::numeric_gradient(x, [&] { return f().value()[0]; }, 1e-6);
    worst = std::max(worst, testing::relative_error(analytic, numeric));
  };
  {
    VD fused = VD::leaf(testing::random_tensor<double>(rng, {1, 3, 16, 16}, 0.1, 0.9));
    const VD ref = VD::constant(testing::random_tensor<double>(rng, {1, 3, 16, 16}, 0.1, 0.9));
    fd(fused, [&] { return perceptual_loss(phi, fused, ref, LossWeights{}); });
  }
  {
    VD real = VD::leaf(testing::random_tensor<double>(rng, {2, 1, 3, 3}));
    VD fake = VD::leaf(testing::random_tensor<double>(rng, {2, 1, 3, 3}));
    fd(real, [&] { return discriminator_loss(real, fake); });
    fd(fake, [&] { return discriminator_loss(real, fake); });
    fd(fake, [&] { return adversarial_loss(fake); });
  }
  {
    VD pred = VD::leaf(testing::random_tensor<double>(rng, {4, 8, 1, 1}, -5, 5));
    const VD truth = VD::constant(testing::random_tensor<double>(rng, {4, 8, 1, 1}, -5, 5));
    fd(pred, [&] { return homography_loss(pred, truth); });
  }
  const double secs = seconds_since(t0);
  return {exact <= 1e-9 && worst < 1e-3 && secs < 120.0,
          fmt("trivial values max err %.2e, worst FD relative err %.2e, %.1f s", exact, worst, secs)};
}

// 3. Architecture shapes at default widths.
Outcome shape_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  ag::NoGradGuard guard;
  std::mt19937_64 rng(23);
  std::vector<std::string> failures;

  const auto nh = init_params<float>(default_arch(NetworkKind::homography), rng);
  const auto h_out = homography_net(nh, ag::Var<float>::constant(testing::random_tensor<float>(rng, {1, 8, 256, 256}, 0, 1)));
  if (h_out.shape() != Shape{1, 8, 1, 1}) failures.push_back("homography");

  const auto att = init_params<float>(default_arch(NetworkKind::attention), rng);
  const auto mer = init_params<float>(default_arch(NetworkKind::merge), rng);
  for (const Size s : {Size{256, 256}, Size{384, 128}}) {
    const ImageBuffer i1 = random_image(rng, s.width, s.height), i2 = random_image(rng, s.width, s.height);
    const auto feats = attention_forward(att, i1, i2);
    const auto out = merge_net(mer, feats.f1, feats.f2p);
    if (out.shape() != Shape{1, 3, s.height, s.width}) failures.push_back("merge " + std::to_string(s.width));
  }

  const auto nd = init_params<float>(default_arch(NetworkKind::discriminator), rng);
  const ImageBuffer x = random_image(rng, 256, 256);
  const auto d_map = discriminator_forward(nd, x, x, x);
  if (d_map.shape() != Shape{1, 1, 16, 16}) failures.push_back("discriminator");

  const ImageBuffer i1 = random_image(rng, 32, 24), i2 = random_image(rng, 32, 24);
  const auto ones = attention_forward(att, i1, i2, AttentionMode::ones);
  if (!(ones.f2p.value() == ones.f2.value())) failures.push_back("attention ones");
  const auto zeros = attention_forward(att, i1, i2, AttentionMode::zeros);
  if (std::any_of(zeros.f2p.value().values().begin(), zeros.f2p.value().values().end(),
                  [](float v) { return v != 0.0f; })) {
    failures.push_back("attention zeros");
  }
  const auto learned = attention_forward(att, i1, i2);
  if (std::any_of(learned.a2.value().values().begin(), learned.a2.value().values().end(),
                  [](float v) { return !(v > 0.0f && v < 1.0f); })) {
    failures.push_back("attention range");
  }

  const double secs = seconds_since(t0);
  std::string failed;
  for (const auto& f : failures) failed += " " + f;
  return {failures.empty() && secs < 60.0,
          fmt("homography (1,8,1,1), merge keeps 256x256 and 384x128, discriminator 16x16 map, attention "
              "ones/zeros exact; %s, %.1f s",
              failures.empty() ? "no failures" : ("failed:" + failed).c_str(), secs)};
}

// 4. Stage-1 learning on procedural scenes.
Outcome stage1_learning(const Options& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path root = opt.work_dir / "stage1_scenes";
  SyntheticDatasetOptions data_opts;
  data_opts.scenes = 24;
  data_opts.exposures = 3;
  data_opts.size = {160, 120};
  data_opts.seed = 41;
  write_synthetic_dataset(root, data_opts);
  ManifestOptions mo;
  mo.load_size = data_opts.size;
  mo.val_scenes = 4;
  const auto manifest = build_manifest(root, mo);
  const PairDataset train(filter_split(manifest, "train"), data_opts.size);
  const PairDataset test(filter_split(manifest, "val"), data_opts.size);

  TrainConfig cfg;
  cfg.patch_size = 64;
  cfg.max_disturbance = 8.0;
  cfg.batch_size = opt.stage1_batch;
  cfg.learning_rate = opt.stage1_lr;
  cfg.load_size = data_opts.size;
  cfg.seed = 43;
  HomographyTrainer trainer(cfg, train);
  const NetworkParams<float> untrained = trainer.params().clone();
  const auto samples = make_test_samples(test, 47, 256, cfg.max_disturbance, cfg.patch_size);

  double window = 0.0;
  for (int s = 1; s <= opt.stage1_steps; ++s) {
    window += trainer.step();
    if (s % opt.stage1_report_every == 0) {
      const auto r = evaluate_alignment(trainer.params(), samples, cfg.threshold_px);
      std::cout << fmt("  stage 1 step %d: train loss %.3f, test corner error %.3f px (identity %.3f), %.0f s\n", s,
                       window / opt.stage1_report_every, r.mean_error, r.baseline_error, seconds_since(t0))
                << std::flush;
      window = 0.0;
    }
  }
  const double secs = seconds_since(t0);
  const auto trained_r = evaluate_alignment(trainer.params(), samples, cfg.threshold_px);
  const auto untrained_r = evaluate_alignment(untrained, samples, cfg.threshold_px);
  const double ratio = trained_r.mean_error / trained_r.baseline_error;
  return {ratio <= 0.5 && trained_r.success_rate > untrained_r.success_rate && secs <= 7200.0,
          fmt("%zu train pairs from 20 scenes, %d steps: corner error %.3f px vs identity %.3f px (ratio %.3f, need "
              "<= 0.5); success@5px trained %.3f vs untrained %.3f; %.0f s CPU",
              train.size(), opt.stage1_steps, trained_r.mean_error, trained_r.baseline_error, ratio,
              trained_r.success_rate, untrained_r.success_rate, secs)};
}

// 5. Stage-2 overfit on one pair.
Outcome stage2_overfit(const Options& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 scene(53);
  const ImageBuffer radiance = render_radiance(scene, {128, 128});
  const PairDataset data = PairDataset::from_pairs(
      {ImagePair{"single", expose(radiance, -1.5), expose(radiance, 1.5), tone_map_reference(radiance)}});

  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.fusion_patch_size = 128;
  cfg.patch_size = 64;
  cfg.seed = 59;
  cfg.weights.w2 = 0.0;
  std::mt19937_64 hrng = network_rng(cfg.seed, NetworkKind::homography);
  const auto nh = init_params<float>(homography_arch(cfg), hrng);

  FusionTrainer feat_only(cfg, data, nh, make_feature_extractor(cfg));
  const FusionBatch batch = feat_only.make_batch(0);
  const double initial = feat_only.feature_loss(batch);
  for (int i = 0; i < opt.stage2_iterations; ++i) {
    feat_only.step();
  }
  const double final_feat = feat_only.feature_loss(batch);
  const double ratio = final_feat / initial;

  cfg.weights.w2 = 0.01;
  FusionTrainer adversarial(cfg, data, nh, make_feature_extractor(cfg));
  bool finite = true;
  double d_first = 0.0, d_max = 0.0, d_last = 0.0;
  const int adv_steps = 100;
  for (int i = 0; i < adv_steps; ++i) {
    const FusionLosses l = adversarial.step();
    finite = finite && std::isfinite(l.feat) && std::isfinite(l.adv) && std::isfinite(l.d) && std::isfinite(l.g);
    if (i == 0) {
      d_first = l.d;
    } else {
      d_max = std::max(d_max, l.d);
    }
    d_last = l.d;
  }
  const double secs = seconds_since(t0);
  // With outputs in [0, 1] the LSGAN discriminator loss cannot exceed 1. The
  // first step is excluded: a freshly initialised D is not confined to [0, 1].
  return {ratio <= 0.1 && finite && d_max <= 1.0 && secs <= 1200.0,
          fmt("w2=0: L_feat %.4f -> %.4f after %d iterations (ratio %.3f, need <= 0.1); w2=0.01: %d steps, losses "
              "%s, D loss %.3f at step 1, max %.3f afterwards (need <= 1), final %.4f; %.0f s",
              initial, final_feat, opt.stage2_iterations, ratio, adv_steps, finite ? "finite" : "NOT finite",
              d_first, d_max, d_last, secs)};
}

// 6. Ablation modes through the command-line entry point.
Outcome ablation_harness(const Options& opt) {
  const fs::path root = opt.work_dir / "ablation_scenes";
  SyntheticDatasetOptions data_opts;
  data_opts.scenes = 2;
  data_opts.exposures = 2;
  data_opts.size = {128, 128};
  data_opts.seed = 61;
  write_synthetic_dataset(root, data_opts);

  const fs::path models = opt.work_dir / "ablation_models";
  fs::create_directories(models);
  TrainConfig cfg;
  for (NetworkKind k : {NetworkKind::homography, NetworkKind::attention, NetworkKind::merge}) {
    std::mt19937_64 rng = network_rng(67, k);
    save_params(models / (std::string(kind_name(k)) + ".flarch"), init_params<float>(default_arch(k), rng));
  }

  const fs::path report = opt.work_dir / "ablation.json", metrics = opt.work_dir / "ablation_metrics.jsonl";
  std::ostringstream out, err;
  const int code = run_cli({"eval-fuse", "--ckpt-dir", models.string(), "--data-root", root.string(), "--load-size",
                            "128x128", "--perturb", "4", "--out", report.string(), "--metrics", metrics.string(),
                            "--force"},
                           out, err);
  if (code != kExitOk) {
    return {false, "eval-fuse exited with " + std::to_string(code) + ": " + err.str()};
  }
  std::cout << out.str();
  std::ifstream in(report);
  const json j = json::parse(in);
  bool ok = true;
  std::string summary;
  for (const char* mode : {"full", "no-align", "attention-ones"}) {
    if (!j["summary"].contains(mode)) {
      ok = false;
      continue;
    }
    for (const char* m : {"psnr", "ssim", "xor"}) {
      ok = ok && std::isfinite(j["summary"][mode][m].get<double>());
    }
    summary += fmt(" %s %.2f dB;", mode, j["summary"][mode]["psnr"].get<double>());
  }
  std::ifstream mlog(metrics);
  int lines = 0;
  for (std::string line; std::getline(mlog, line);) ++lines;
  ok = ok && lines == 2 * 3 * 3;
  return {ok, fmt("three modes reported side by side (%s %d metric records); untrained weights, quality not judged",
                  summary.c_str(), lines)};
}

// 7. Determinism of samples, initialisation and one training epoch.
Outcome determinism(const Options& opt) {
  (void)opt;
  std::mt19937_64 scene(71);
  std::vector<ImagePair> pairs;
  for (int i = 0; i < 3; ++i) {
    const ImageBuffer r = render_radiance(scene, {96, 96});
    pairs.push_back({"s" + std::to_string(i), expose(r, -1.5), expose(r, 1.5), tone_map_reference(r)});
  }
  const PairDataset data = PairDataset::from_pairs(pairs);
  std::vector<std::string> failures;

  for (std::uint64_t idx : {0ULL, 5ULL, 12345ULL}) {
    const auto a = draw_sample(data, 3, idx, 8.0, 64), b = draw_sample(data, 3, idx, 8.0, 64);
    if (!(a.under_patch == b.under_patch && a.over_patch_warped == b.over_patch_warped &&
          a.gt_offsets == b.gt_offsets && a.reference_patch == b.reference_patch)) {
      failures.push_back("sample " + std::to_string(idx));
    }
  }
  for (NetworkKind k : {NetworkKind::homography, NetworkKind::attention, NetworkKind::merge,
                        NetworkKind::discriminator, NetworkKind::feature_extractor}) {
    std::mt19937_64 r1 = network_rng(9, k), r2 = network_rng(9, k);
    if (init_params<float>(default_arch(k), r1).fingerprint() != init_params<float>(default_arch(k), r2).fingerprint()) {
      failures.push_back("init " + std::string(kind_name(k)));
    }
  }

  TrainConfig cfg;
  cfg.patch_size = 64;
  cfg.batch_size = 2;
  cfg.max_disturbance = 8.0;
  cfg.iterations_per_epoch = 4;
  cfg.fusion_patch_size = 32;
  cfg.attention_width = 8;
  cfg.merge_depth = 3;
  cfg.discriminator_width = 8;
  cfg.phi_width = 8;
  cfg.seed = 73;
  auto stage1_epoch = [&] {
    HomographyTrainer t(cfg, data);
    for (int i = 0; i < cfg.iterations_per_epoch; ++i) t.step();
    return t.params().fingerprint();
  };
  if (stage1_epoch() != stage1_epoch()) failures.push_back("stage-1 epoch");
  std::mt19937_64 hrng = network_rng(cfg.seed, NetworkKind::homography);
  const auto nh = init_params<float>(homography_arch(cfg), hrng);
  auto stage2_epoch = [&] {
    FusionTrainer t(cfg, data, nh, make_feature_extractor(cfg));
    for (int i = 0; i < cfg.iterations_per_epoch; ++i) t.step();
    return std::array{t.attention().fingerprint(), t.merge().fingerprint(), t.discriminator().fingerprint()};
  };
  if (stage2_epoch() != stage2_epoch()) failures.push_back("stage-2 epoch");

  std::string failed;
  for (const auto& f : failures) failed += " " + f;
  return {failures.empty(), failures.empty()
                                ? "samples, initial parameters of all five networks and one epoch of each stage "
                                  "are bit-identical across runs"
                                : "mismatch:" + failed};
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  std::vector<int> only;
  CLI::App app{"fuselite acceptance checks"};
  app.add_option("--only", only, "Run only these criteria");
  app.add_option("--stage1-steps", opt.stage1_steps);
  app.add_option("--stage1-lr", opt.stage1_lr);
  app.add_option("--stage1-batch", opt.stage1_batch);
  app.add_option("--stage2-iterations", opt.stage2_iterations);
  app.add_option("--work-dir", opt.work_dir);
  app.add_option("--log", opt.log, "Append result lines to this file");
  CLI11_PARSE(app, argc, argv);

  testing::TempDir tmp("acceptance");
  if (opt.work_dir.empty()) opt.work_dir = tmp.path();
  fs::create_directories(opt.work_dir);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"geometry oracle suite", geometry_suite},
      {"loss analytic suite", loss_suite},
      {"architecture shape suite", shape_suite},
      {"stage-1 desk-scale learning", [&] { return stage1_learning(opt); }},
      {"stage-2 overfit check", [&] { return stage2_overfit(opt); }},
      {"ablation harness", [&] { return ablation_harness(opt); }},
      {"determinism", [&] { return determinism(opt); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    const std::string line = "criterion " + std::to_string(id) + " [" + criteria[i].first +
                             "]: " + (o.pass ? "PASS" : "FAIL") + " - " + o.detail;
    std::cout << line << std::endl;
    if (!opt.log.empty()) {
      std::ofstream(opt.log, std::ios::app) << line << "\n";
    }
  }
  return failed == 0 ? 0 : 1;
}
