#include "fuselite/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "fuselite/archive.hpp"
#include "fuselite/dataio.hpp"
#include "fuselite/losses.hpp"
#include "fuselite/mtb.hpp"
#include "fuselite/quality.hpp"
#include "fuselite/synthetic.hpp"
#include "fuselite/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fuselite {

// ---------------------------------------------------------------- pipeline

FusionModels load_fusion_models(const fs::path& ckpt_dir, const fs::path& homography_ckpt, bool need_homography) {
  require(fs::is_directory(ckpt_dir), ErrorCode::CheckpointMismatch, "no checkpoint directory " + ckpt_dir.string());
  FusionModels m;
  m.attention = load_params<float>(ckpt_dir / "attention.flarch");
  m.merge = load_params<float>(ckpt_dir / "merge.flarch");
  require(m.attention.kind() == NetworkKind::attention && m.merge.kind() == NetworkKind::merge,
          ErrorCode::CheckpointMismatch, ckpt_dir.string() + " does not hold attention/merge parameters");
  require(m.attention.arch().width == m.merge.arch().width, ErrorCode::CheckpointMismatch,
          "attention and merge widths disagree");
  if (need_homography) {
    m.homography = load_homography_checkpoint(homography_ckpt.empty() ? ckpt_dir : homography_ckpt);
  }
  return m;
}

AlignOutput align_pair(const NetworkParams<float>& nh, const ImageBuffer& under, const ImageBuffer& over) {
  require(under.size() == over.size(), ErrorCode::DimensionMismatch, "under and over differ in size");
  AlignOutput out;
  out.offsets = homography_predictor(nh)(under, over);
  out.h = offsets_to_matrix(out.offsets);
  out.warped = warp_image(over, out.h, under.size());
  return out;
}

FuseOutput fuse_pair(const FusionModels& models, const ImageBuffer& under, const ImageBuffer& over,
                     const FuseOptions& options) {
  require(under.size() == over.size(), ErrorCode::DimensionMismatch, "under and over differ in size");
  FuseOutput out;
  if (options.align) {
    require(models.homography.kind() == NetworkKind::homography && !models.homography.entries().empty(),
            ErrorCode::CheckpointMismatch, "alignment requested without homography parameters");
    AlignOutput a = align_pair(models.homography, under, over);
    out.h = a.h;
    out.over_aligned = std::move(a.warped.image);
  } else {
    out.over_aligned = over;
  }

  const int unit = 1 << models.merge.arch().depth;
  const int pad_w = (unit - under.width() % unit) % unit;
  const int pad_h = (unit - under.height() % unit) % unit;
  const ImageBuffer u = reflect_pad(under, pad_w, pad_h);
  const ImageBuffer o = reflect_pad(out.over_aligned, pad_w, pad_h);

  ag::NoGradGuard guard;
  ag::Var<float> f1, f2p;
  {
    AttentionOutput<float> att = attention_forward(models.attention, u, o, options.attention);
    f1 = att.f1;
    f2p = att.f2p;
  }
  const ImageBuffer padded = merge_forward(models.merge, f1, f2p);
  out.fused = crop(padded, 0, 0, under.width(), under.height());
  return out;
}

void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    require(static_cast<bool>(out), ErrorCode::IoError, "cannot write " + tmp.string());
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

json RunManifest::to_json() const {
  return {{"command", command},
          {"argv", argv},
          {"config", config},
          {"inputs", inputs},
          {"outputs", outputs},
          {"seed", seed},
          {"tool_version", kToolVersion},
          {"started_at", started_at},
          {"wall_seconds", wall_seconds}};
}

// ---------------------------------------------------------------- commands

namespace {

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::vector<std::string> argv;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  std::string started_at;
};

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

Size parse_size(const std::string& text) {
  const auto x = text.find('x');
  require(x != std::string::npos, ErrorCode::InvalidArgument, "size must look like WIDTHxHEIGHT: " + text);
  try {
    return {std::stoi(text.substr(0, x)), std::stoi(text.substr(x + 1))};
  } catch (const std::exception&) {
    fail(ErrorCode::InvalidArgument, "size must look like WIDTHxHEIGHT: " + text);
  }
}

void refuse_overwrite(const std::vector<fs::path>& outputs, bool force) {
  if (force) {
    return;
  }
  for (const auto& p : outputs) {
    require(p.empty() || !fs::exists(p), ErrorCode::IoError, p.string() + " exists; pass --force to overwrite");
  }
}

fs::path manifest_path_for(const fs::path& output) {
  if (fs::is_directory(output)) {
    return output / "run_manifest.json";
  }
  return output.string() + ".run.json";
}

void finish(Context& ctx, RunManifest m, const fs::path& anchor) {
  m.argv = ctx.argv;
  m.started_at = ctx.started_at;
  m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
  write_json_file(manifest_path_for(anchor), m.to_json());
}

fs::path data_root_or_env(const std::string& flag) {
  if (!flag.empty()) {
    return flag;
  }
  if (const char* env = std::getenv(kDataRootEnv); env != nullptr && *env != '\0') {
    return env;
  }
  fail(ErrorCode::DataUnavailable, std::string("no data root: pass --data-root or set ") + kDataRootEnv);
}

AttentionMode parse_attention(const std::string& s) {
  if (s == "learned") return AttentionMode::learned;
  if (s == "ones") return AttentionMode::ones;
  if (s == "zeros") return AttentionMode::zeros;
  fail(ErrorCode::InvalidArgument, "attention mode must be learned, ones or zeros");
}

std::vector<ManifestEntry> load_manifest_or_build(const std::string& manifest, const std::string& data_root,
                                                  Size load_size, int val_scenes) {
  if (!manifest.empty()) {
    return read_manifest(manifest);
  }
  ManifestOptions opts;
  opts.load_size = load_size;
  opts.val_scenes = val_scenes;
  return build_manifest(data_root_or_env(data_root), opts);
}

// -- make-scenes

struct MakeScenesArgs {
  std::string out;
  int scenes = 4;
  int exposures = 3;
  std::string size = "320x240";
  std::uint64_t seed = 1;
  bool force = false;
};

int cmd_make_scenes(Context& ctx, const MakeScenesArgs& a) {
  refuse_overwrite({a.out}, a.force);
  SyntheticDatasetOptions opts;
  opts.scenes = a.scenes;
  opts.exposures = a.exposures;
  opts.size = parse_size(a.size);
  opts.seed = a.seed;
  const auto ids = write_synthetic_dataset(a.out, opts);
  ctx.out << "wrote " << ids.size() << " scenes to " << a.out << "\n";
  RunManifest m;
  m.command = "make-scenes";
  m.config = {{"scenes", a.scenes}, {"exposures", a.exposures}, {"size", a.size}};
  m.outputs = {a.out};
  m.seed = a.seed;
  finish(ctx, m, a.out);
  return kExitOk;
}

// -- synth-data

struct SynthDataArgs {
  std::string data_root;
  std::string out;
  std::string load_size = "1200x800";
  int val_scenes = 0;
  bool force = false;
};

int cmd_synth_data(Context& ctx, const SynthDataArgs& a) {
  refuse_overwrite({a.out}, a.force);
  const fs::path root = data_root_or_env(a.data_root);
  ManifestOptions opts;
  opts.load_size = parse_size(a.load_size);
  opts.val_scenes = a.val_scenes;
  const auto entries = build_manifest(root, opts);
  write_manifest(a.out, entries);
  const auto train = filter_split(entries, "train").size();
  ctx.out << "manifest " << a.out << ": " << entries.size() << " pairs (" << train << " train, "
          << entries.size() - train << " val)\n";
  RunManifest m;
  m.command = "synth-data";
  m.config = {{"load_size", a.load_size}, {"val_scenes", a.val_scenes}};
  m.inputs = {root.string()};
  m.outputs = {a.out};
  finish(ctx, m, a.out);
  return kExitOk;
}

// -- train-h / train-fusion

struct TrainArgs {
  std::string config;
  std::string manifest;
  std::string data_root;
  std::string ckpt_dir;
  std::string h_ckpt;
  std::string metrics;
  int epochs = -1;
  int iterations = -1;
  double lr = -1.0;
  std::int64_t seed = -1;
  bool resume = false;
  bool force = false;
};

TrainConfig training_config(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_train_config(a.config);
  if (!a.data_root.empty()) cfg.data_root = a.data_root;
  if (cfg.data_root.empty()) {
    if (const char* env = std::getenv(kDataRootEnv); env != nullptr && *env != '\0') cfg.data_root = env;
  }
  if (!a.manifest.empty()) cfg.manifest = a.manifest;
  cfg.checkpoint_dir = a.ckpt_dir;
  if (!a.metrics.empty()) cfg.metrics_path = a.metrics;
  if (cfg.metrics_path.empty()) cfg.metrics_path = fs::path(a.ckpt_dir) / "metrics.jsonl";
  if (a.iterations >= 0) cfg.iterations_per_epoch = a.iterations;
  if (a.lr >= 0.0) cfg.learning_rate = a.lr;
  if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
  cfg.validate();
  return cfg;
}

std::vector<ManifestEntry> training_manifest(const TrainConfig& cfg) {
  if (!cfg.manifest.empty()) {
    return read_manifest(cfg.manifest);
  }
  ManifestOptions opts;
  opts.load_size = cfg.load_size;
  return build_manifest(data_root_or_env(cfg.data_root.string()), opts);
}

int cmd_train_h(Context& ctx, const TrainArgs& a) {
  TrainConfig cfg = training_config(a);
  if (a.epochs >= 0) cfg.stage1_epochs = a.epochs;
  if (!a.resume) {
    refuse_overwrite({cfg.checkpoint_dir / "trainer.json"}, a.force);
  }
  const auto manifest = training_manifest(cfg);
  MetricsLog log(cfg.metrics_path, a.resume);
  const Stage1Result r = train_stage1(cfg, manifest, log, a.resume);
  if (!r.epoch_loss.empty()) {
    ctx.out << "stage 1: " << r.epoch_loss.size() << " epochs, final loss " << r.epoch_loss.back() << "\n";
  }
  ctx.out << "val corner error " << r.final_val.mean_error << " px (identity " << r.final_val.baseline_error
          << " px), success@" << cfg.threshold_px << "px " << r.final_val.success_rate << "\n";
  RunManifest m;
  m.command = "train-h";
  m.config = config_to_json(cfg);
  m.inputs = {cfg.manifest.empty() ? cfg.data_root.string() : cfg.manifest.string()};
  m.outputs = {cfg.checkpoint_dir.string(), cfg.metrics_path.string()};
  m.seed = cfg.seed;
  finish(ctx, m, cfg.checkpoint_dir);
  return kExitOk;
}

int cmd_train_fusion(Context& ctx, const TrainArgs& a) {
  TrainConfig cfg = training_config(a);
  if (a.epochs >= 0) cfg.stage2_epochs = a.epochs;
  if (!a.resume) {
    refuse_overwrite({cfg.checkpoint_dir / "trainer.json"}, a.force);
  }
  const auto manifest = training_manifest(cfg);
  MetricsLog log(cfg.metrics_path, a.resume);
  const Stage2Result r = train_stage2(cfg, manifest, a.h_ckpt, log, a.resume);
  // Copy the frozen regressor next to the generator so `fuse` needs one directory.
  fs::copy_file(fs::is_directory(a.h_ckpt) ? fs::path(a.h_ckpt) / "homography.flarch" : fs::path(a.h_ckpt),
                cfg.checkpoint_dir / "homography.flarch", fs::copy_options::overwrite_existing);
  if (!r.steps.empty()) {
    const auto& last = r.steps.back();
    ctx.out << "stage 2: " << r.steps.size() << " steps, L_feat " << r.steps.front().feat << " -> " << last.feat;
    if (last.d_updated) {
      ctx.out << ", D loss " << last.d << ", D band share " << r.d_band_fraction;
    }
    ctx.out << "\n";
  }
  RunManifest m;
  m.command = "train-fusion";
  m.config = config_to_json(cfg);
  m.inputs = {cfg.manifest.empty() ? cfg.data_root.string() : cfg.manifest.string(), a.h_ckpt};
  m.outputs = {cfg.checkpoint_dir.string(), cfg.metrics_path.string()};
  m.seed = cfg.seed;
  finish(ctx, m, cfg.checkpoint_dir);
  return kExitOk;
}

// -- eval-align

struct EvalAlignArgs {
  std::string h_ckpt;
  std::string manifest;
  std::string data_root;
  std::string split = "val";
  std::string load_size = "1200x800";
  int samples = 64;
  double max_disturbance = kDefaultMaxDisturbance;
  int patch_size = 0;
  double threshold = 5.0;
  std::uint64_t seed = 1;
  bool compare_untrained = false;
  std::string out;
  std::string metrics;
  bool force = false;
};

json report_json(const AlignmentReport& r) {
  return {{"pairs", r.pairs},
          {"threshold_px", r.threshold_px},
          {"success_rate", r.success_rate},
          {"mean_corner_error", r.mean_error},
          {"median_corner_error", r.median_error},
          {"identity_corner_error", r.baseline_error},
          {"xor_before", r.xor_before},
          {"xor_after", r.xor_after}};
}

void print_report(std::ostream& out, const std::string& label, const AlignmentReport& r) {
  out << std::fixed << std::setprecision(4) << label << ": success " << r.success_rate << " mean "
      << r.mean_error << " px median " << r.median_error << " px identity " << r.baseline_error << " px xor "
      << r.xor_before << " -> " << r.xor_after << "\n";
  out.unsetf(std::ios::floatfield);
}

int cmd_eval_align(Context& ctx, const EvalAlignArgs& a) {
  refuse_overwrite({a.out}, a.force);
  const NetworkParams<float> nh = load_homography_checkpoint(a.h_ckpt);
  const int patch = a.patch_size > 0 ? a.patch_size : nh.arch().input_size;
  auto entries = load_manifest_or_build(a.manifest, a.data_root, parse_size(a.load_size), 0);
  auto split = filter_split(entries, a.split);
  if (split.empty()) {
    split = entries;
  }
  const PairDataset data(split, parse_size(a.load_size));
  const auto samples = make_test_samples(data, a.seed, a.samples, a.max_disturbance, patch);
  const AlignmentReport trained = evaluate_alignment(nh, samples, a.threshold);
  print_report(ctx.out, "trained", trained);
  json report{{"trained", report_json(trained)}};
  MetricsLog log(a.metrics);
  log.log(0, 0, "success_rate", trained.success_rate);
  log.log(0, 0, "mean_corner_error", trained.mean_error);
  log.log(0, 0, "xor_after", trained.xor_after);
  if (a.compare_untrained) {
    std::mt19937_64 rng = network_rng(a.seed, NetworkKind::homography);
    const auto untrained = init_params<float>(nh.arch(), rng);
    const AlignmentReport base = evaluate_alignment(untrained, samples, a.threshold);
    print_report(ctx.out, "untrained", base);
    report["untrained"] = report_json(base);
  }
  RunManifest m;
  m.command = "eval-align";
  m.config = {{"split", a.split}, {"samples", a.samples}, {"max_disturbance", a.max_disturbance},
              {"patch_size", patch}, {"threshold_px", a.threshold}, {"load_size", a.load_size}};
  m.inputs = {a.h_ckpt, a.manifest.empty() ? a.data_root : a.manifest};
  m.seed = a.seed;
  if (!a.out.empty()) {
    write_json_file(a.out, report);
    m.outputs = {a.out};
    finish(ctx, m, a.out);
  }
  return kExitOk;
}

// -- eval-fuse

struct EvalFuseArgs {
  std::string ckpt_dir;
  std::string h_ckpt;
  std::string manifest;
  std::string data_root;
  std::string split = "val";
  std::string load_size = "1200x800";
  std::string modes = "full,no-align,attention-ones";
  double perturb = 0.0;
  int limit = 0;
  std::uint64_t seed = 1;
  std::string pred;
  std::string reference;
  std::string out;
  std::string metrics;
  bool force = false;
};

struct ModeSpec {
  std::string name;
  FuseOptions options;
};

std::vector<ModeSpec> parse_modes(const std::string& text) {
  std::vector<ModeSpec> out;
  std::stringstream s(text);
  std::string item;
  while (std::getline(s, item, ',')) {
    if (item == "full") out.push_back({item, {true, AttentionMode::learned}});
    else if (item == "no-align") out.push_back({item, {false, AttentionMode::learned}});
    else if (item == "attention-ones") out.push_back({item, {true, AttentionMode::ones}});
    else fail(ErrorCode::InvalidArgument, "unknown eval mode '" + item + "' (full, no-align, attention-ones)");
  }
  require(!out.empty(), ErrorCode::InvalidArgument, "no eval modes given");
  return out;
}

int cmd_eval_fuse(Context& ctx, const EvalFuseArgs& a) {
  refuse_overwrite({a.out}, a.force);
  if (!a.pred.empty() || !a.reference.empty()) {
    require(!a.pred.empty() && !a.reference.empty(), ErrorCode::InvalidArgument,
            "--pred and --reference go together");
    const ImageBuffer p = read_image(a.pred);
    const ImageBuffer r = read_image(a.reference);
    const json report{{"psnr", psnr(p, r)}, {"ssim", ssim(p, r)}};
    ctx.out << "psnr " << report["psnr"].get<double>() << " dB, ssim " << report["ssim"].get<double>() << "\n";
    if (!a.out.empty()) {
      write_json_file(a.out, report);
    }
    return kExitOk;
  }

  const auto modes = parse_modes(a.modes);
  const bool any_align = std::any_of(modes.begin(), modes.end(), [](const ModeSpec& m) { return m.options.align; });
  const FusionModels models = load_fusion_models(a.ckpt_dir, a.h_ckpt, any_align);
  const Size load = parse_size(a.load_size);
  auto entries = load_manifest_or_build(a.manifest, a.data_root, load, 0);
  auto split = filter_split(entries, a.split);
  if (split.empty()) {
    split = entries;
  }
  if (a.limit > 0 && static_cast<int>(split.size()) > a.limit) {
    split.resize(static_cast<std::size_t>(a.limit));
  }
  const PairDataset data(split, load, false);

  struct Totals {
    double psnr = 0, ssim = 0, xor_ratio = 0;
  };
  std::vector<Totals> totals(modes.size());
  MetricsLog log(a.metrics);
  json per_pair = json::array();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto pair = data.get(i);
    ImageBuffer over = pair->over;
    if (a.perturb > 0.0) {
      // Misalign the over image by a known random homography.
      std::mt19937_64 rng = sample_rng(a.seed, i);
      const CornerOffsets o = sample_random_offsets(rng, over.size(), a.perturb);
      over = warp_image(over, offsets_to_matrix(o).inverse(), over.size()).image;
    }
    const Bitmap under_mtb = compute_mtb(pair->under);
    json row{{"scene_id", pair->scene_id}};
    for (std::size_t k = 0; k < modes.size(); ++k) {
      const FuseOutput f = fuse_pair(models, pair->under, over, modes[k].options);
      const double p = psnr(f.fused, pair->reference);
      const double s = ssim(f.fused, pair->reference);
      const double x = xor_difference(under_mtb, compute_mtb(f.over_aligned)).ratio;
      totals[k].psnr += p;
      totals[k].ssim += s;
      totals[k].xor_ratio += x;
      row[modes[k].name] = {{"psnr", p}, {"ssim", s}, {"xor", x}};
      log.log(static_cast<std::int64_t>(i), 0, modes[k].name + "/psnr", p);
      log.log(static_cast<std::int64_t>(i), 0, modes[k].name + "/ssim", s);
      log.log(static_cast<std::int64_t>(i), 0, modes[k].name + "/xor", x);
    }
    per_pair.push_back(row);
  }

  const double n = std::max<double>(1.0, static_cast<double>(data.size()));
  json summary = json::object();
  ctx.out << std::left << std::setw(16) << "mode" << std::setw(12) << "psnr_db" << std::setw(10) << "ssim"
          << "xor\n";
  for (std::size_t k = 0; k < modes.size(); ++k) {
    const double p = totals[k].psnr / n, s = totals[k].ssim / n, x = totals[k].xor_ratio / n;
    summary[modes[k].name] = {{"psnr", p}, {"ssim", s}, {"xor", x}};
    ctx.out << std::left << std::setw(16) << modes[k].name << std::fixed << std::setprecision(3) << std::setw(12) << p
            << std::setprecision(4) << std::setw(10) << s << x << "\n";
    ctx.out.unsetf(std::ios::floatfield);
  }
  ctx.out << "pairs: " << data.size() << "\n";
  RunManifest m;
  m.command = "eval-fuse";
  m.config = {{"modes", a.modes}, {"split", a.split}, {"load_size", a.load_size}, {"perturb", a.perturb},
              {"limit", a.limit}};
  m.inputs = {a.ckpt_dir, a.manifest.empty() ? a.data_root : a.manifest};
  m.seed = a.seed;
  if (!a.out.empty()) {
    write_json_file(a.out, {{"pairs", data.size()}, {"summary", summary}, {"per_pair", per_pair}});
    m.outputs = {a.out};
    finish(ctx, m, a.out);
  }
  return kExitOk;
}

// -- align

struct AlignArgs {
  std::string under;
  std::string over;
  std::string ckpt;
  std::string out;
  std::string dump_h;
  std::string xor_vis;
  bool force = false;
};

int cmd_align(Context& ctx, const AlignArgs& a) {
  refuse_overwrite({a.out, a.dump_h, a.xor_vis}, a.force);
  const NetworkParams<float> nh = load_homography_checkpoint(a.ckpt);
  const ImageBuffer under = read_image(a.under);
  const ImageBuffer over = read_image(a.over);
  require(under.size() == over.size(), ErrorCode::DimensionMismatch, "under and over differ in size");
  const AlignOutput r = align_pair(nh, under, over);
  write_image(a.out, r.warped.image);

  const Bitmap under_mtb = compute_mtb(under);
  const double before = xor_difference(under_mtb, compute_mtb(over)).ratio;
  const double after = masked_xor_ratio(under_mtb, compute_mtb(r.warped.image), r.warped.validity);
  ctx.out << "homography " << format_row_major(r.h) << "\n"
          << "xor " << before << " -> " << after << "\n";
  RunManifest m;
  m.command = "align";
  m.inputs = {a.under, a.over, a.ckpt};
  m.outputs = {a.out};
  if (!a.dump_h.empty()) {
    json j = homography_to_json(r.h);
    j["offsets"] = offsets_to_json(r.offsets);
    j["xor_before"] = before;
    j["xor_after"] = after;
    write_json_file(a.dump_h, j);
    m.outputs.push_back(a.dump_h);
  }
  if (!a.xor_vis.empty()) {
    Bitmap diff = xor_difference(under_mtb, compute_mtb(r.warped.image)).diff;
    for (std::size_t i = 0; i < diff.bits.size(); ++i) {
      diff.bits[i] = static_cast<std::uint8_t>(diff.bits[i] & r.warped.validity.bits[i]);
    }
    write_bitmap(a.xor_vis, diff);
    m.outputs.push_back(a.xor_vis);
  }
  finish(ctx, m, a.out);
  return kExitOk;
}

// -- fuse

struct FuseArgs {
  std::string under;
  std::string over;
  std::string ckpt_dir;
  std::string h_ckpt;
  std::string out;
  std::string attention = "learned";
  bool no_align = false;
  int bit_depth = 8;
  bool force = false;
};

int cmd_fuse(Context& ctx, const FuseArgs& a) {
  refuse_overwrite({a.out}, a.force);
  const FusionModels models = load_fusion_models(a.ckpt_dir, a.h_ckpt, !a.no_align);
  const ImageBuffer under = read_image(a.under);
  const ImageBuffer over = read_image(a.over);
  FuseOptions opts;
  opts.align = !a.no_align;
  opts.attention = parse_attention(a.attention);
  const FuseOutput f = fuse_pair(models, under, over, opts);
  write_image(a.out, f.fused, a.bit_depth);
  ctx.out << "fused " << under.width() << "x" << under.height() << " -> " << a.out << "\n";
  RunManifest m;
  m.command = "fuse";
  m.config = {{"align", opts.align}, {"attention", a.attention}, {"bit_depth", a.bit_depth}};
  if (opts.align) {
    m.config["homography"] = homography_to_json(f.h);
  }
  m.inputs = {a.under, a.over, a.ckpt_dir};
  m.outputs = {a.out};
  finish(ctx, m, a.out);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-exposure alignment and fusion toolkit", "fuselite"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  MakeScenesArgs scenes;
  auto* c_scenes = app.add_subcommand("make-scenes", "Write a procedural exposure-stack dataset");
  c_scenes->add_option("--out", scenes.out, "Dataset root to create")->required();
  c_scenes->add_option("--scenes", scenes.scenes)->check(CLI::PositiveNumber);
  c_scenes->add_option("--exposures", scenes.exposures)->check(CLI::Range(2, 64));
  c_scenes->add_option("--size", scenes.size, "WIDTHxHEIGHT");
  c_scenes->add_option("--seed", scenes.seed);
  c_scenes->add_flag("--force", scenes.force);

  SynthDataArgs synth;
  auto* c_synth = app.add_subcommand("synth-data", "Build the pair manifest for a dataset root");
  c_synth->add_option("--data-root", synth.data_root, std::string("Dataset root (default $") + kDataRootEnv + ")");
  c_synth->add_option("--out", synth.out, "Manifest path (JSON lines)")->required();
  c_synth->add_option("--load-size", synth.load_size, "WIDTHxHEIGHT");
  c_synth->add_option("--val-scenes", synth.val_scenes, "Trailing scenes held out for validation");
  c_synth->add_flag("--force", synth.force);

  TrainArgs train_h;
  auto* c_train_h = app.add_subcommand("train-h", "Stage 1: train the homography regressor");
  TrainArgs train_f;
  auto* c_train_f = app.add_subcommand("train-fusion", "Stage 2: train attention, merge and discriminator");
  for (auto [cmd, t] : {std::pair{c_train_h, &train_h}, std::pair{c_train_f, &train_f}}) {
    cmd->add_option("--config", t->config, "YAML training config")->check(CLI::ExistingFile);
    cmd->add_option("--manifest", t->manifest)->check(CLI::ExistingFile);
    cmd->add_option("--data-root", t->data_root);
    cmd->add_option("--ckpt-dir", t->ckpt_dir, "Checkpoint directory")->required();
    cmd->add_option("--metrics", t->metrics, "Metrics JSONL (default <ckpt-dir>/metrics.jsonl)");
    cmd->add_option("--epochs", t->epochs);
    cmd->add_option("--iterations", t->iterations, "Iterations per epoch");
    cmd->add_option("--lr", t->lr);
    cmd->add_option("--seed", t->seed);
    cmd->add_flag("--resume", t->resume);
    cmd->add_flag("--force", t->force);
  }
  c_train_f->add_option("--h-ckpt", train_f.h_ckpt, "Stage-1 checkpoint")->required();

  EvalAlignArgs ea;
  auto* c_ea = app.add_subcommand("eval-align", "Corner error and success rate on synthetic warps");
  c_ea->add_option("--h-ckpt", ea.h_ckpt)->required();
  c_ea->add_option("--manifest", ea.manifest)->check(CLI::ExistingFile);
  c_ea->add_option("--data-root", ea.data_root);
  c_ea->add_option("--split", ea.split);
  c_ea->add_option("--load-size", ea.load_size);
  c_ea->add_option("--samples", ea.samples)->check(CLI::PositiveNumber);
  c_ea->add_option("--max-disturbance", ea.max_disturbance);
  c_ea->add_option("--patch-size", ea.patch_size);
  c_ea->add_option("--threshold", ea.threshold, "Success threshold in pixels");
  c_ea->add_option("--seed", ea.seed);
  c_ea->add_flag("--compare-untrained", ea.compare_untrained);
  c_ea->add_option("--out", ea.out, "Report JSON");
  c_ea->add_option("--metrics", ea.metrics);
  c_ea->add_flag("--force", ea.force);

  EvalFuseArgs ef;
  auto* c_ef = app.add_subcommand("eval-fuse", "PSNR/SSIM/XOR of fusion variants against references");
  c_ef->add_option("--ckpt-dir", ef.ckpt_dir);
  c_ef->add_option("--h-ckpt", ef.h_ckpt);
  c_ef->add_option("--manifest", ef.manifest)->check(CLI::ExistingFile);
  c_ef->add_option("--data-root", ef.data_root);
  c_ef->add_option("--split", ef.split);
  c_ef->add_option("--load-size", ef.load_size);
  c_ef->add_option("--modes", ef.modes, "Comma list of full, no-align, attention-ones");
  c_ef->add_option("--perturb", ef.perturb, "Misalign over images by up to this many pixels");
  c_ef->add_option("--limit", ef.limit);
  c_ef->add_option("--seed", ef.seed);
  c_ef->add_option("--pred", ef.pred)->check(CLI::ExistingFile);
  c_ef->add_option("--reference", ef.reference)->check(CLI::ExistingFile);
  c_ef->add_option("--out", ef.out, "Report JSON");
  c_ef->add_option("--metrics", ef.metrics);
  c_ef->add_flag("--force", ef.force);

  AlignArgs al;
  auto* c_align = app.add_subcommand("align", "Warp the over exposure onto the under exposure");
  c_align->add_option("--under", al.under)->required()->check(CLI::ExistingFile);
  c_align->add_option("--over", al.over)->required()->check(CLI::ExistingFile);
  c_align->add_option("--ckpt", al.ckpt, "Homography checkpoint")->required();
  c_align->add_option("--out", al.out)->required();
  c_align->add_option("--dump-h", al.dump_h, "Write the homography as JSON");
  c_align->add_option("--xor-vis", al.xor_vis, "Write the MTB XOR difference as a 1-bit PNG");
  c_align->add_flag("--force", al.force);

  FuseArgs fu;
  auto* c_fuse = app.add_subcommand("fuse", "Align and fuse an exposure pair");
  c_fuse->add_option("--under", fu.under)->required()->check(CLI::ExistingFile);
  c_fuse->add_option("--over", fu.over)->required()->check(CLI::ExistingFile);
  c_fuse->add_option("--ckpt-dir", fu.ckpt_dir, "Stage-2 checkpoint directory")->required();
  c_fuse->add_option("--h-ckpt", fu.h_ckpt, "Homography checkpoint (default: inside --ckpt-dir)");
  c_fuse->add_option("--out", fu.out)->required();
  c_fuse->add_option("--attention", fu.attention, "learned, ones or zeros");
  c_fuse->add_flag("--no-align", fu.no_align);
  c_fuse->add_option("--bit-depth", fu.bit_depth)->check(CLI::IsMember({8, 16}));
  c_fuse->add_flag("--force", fu.force);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitUsage;
  }

  Context ctx{out, err, args, std::chrono::steady_clock::now(), utc_now()};
  try {
    if (c_scenes->parsed()) return cmd_make_scenes(ctx, scenes);
    if (c_synth->parsed()) return cmd_synth_data(ctx, synth);
    if (c_train_h->parsed()) return cmd_train_h(ctx, train_h);
    if (c_train_f->parsed()) return cmd_train_fusion(ctx, train_f);
    if (c_ea->parsed()) return cmd_eval_align(ctx, ea);
    if (c_ef->parsed()) {
      if (ef.pred.empty() && ef.ckpt_dir.empty()) {
        err << "usage error: eval-fuse needs --ckpt-dir, or --pred with --reference\n";
        return kExitUsage;
      }
      return cmd_eval_fuse(ctx, ef);
    }
    if (c_align->parsed()) return cmd_align(ctx, al);
    if (c_fuse->parsed()) return cmd_fuse(ctx, fu);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace fuselite
