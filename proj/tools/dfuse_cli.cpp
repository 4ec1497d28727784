// dfuse: batch command line over the depth-completion pipeline.
//
// Exit codes: 0 success, 1 usage, 2 data/format, 3 numeric failure.
//
// Every subcommand can read its flags from a config file given with
// --config (INI/TOML, one [section] per subcommand). Flags on the command
// line override values from the file.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dfuse/error.hpp"
#include "dfuse/eval.hpp"
#include "dfuse/fill.hpp"
#include "dfuse/imageio.hpp"
#include "dfuse/network.hpp"
#include "dfuse/parallel.hpp"
#include "dfuse/sample.hpp"
#include "dfuse/stereo.hpp"
#include "dfuse/train.hpp"

namespace fs = std::filesystem;
using namespace dfuse;

namespace {

struct FillFlags {
  int initial_px = 5;
  std::string initial_shape = "diamond";
  int closing_px = 5;
  int hole_px = 9;
  int hole_iterations = 10;
  int blur_px = 5;
  double blur_sigma_px = 1.0;

  void attach(CLI::App* app) {
    app->add_option("--initial-kernel-px", initial_px,
                    "first dilation kernel size [px]")
        ->capture_default_str();
    app->add_option("--initial-kernel-shape", initial_shape,
                    "first dilation kernel shape: full, diamond or cross")
        ->check(CLI::IsMember({"full", "diamond", "cross"}))
        ->capture_default_str();
    app->add_option("--closing-kernel-px", closing_px, "closing kernel size [px]")
        ->capture_default_str();
    app->add_option("--hole-kernel-px", hole_px, "hole dilation kernel size [px]")
        ->capture_default_str();
    app->add_option("--hole-iterations", hole_iterations,
                    "maximum hole dilation passes [count]")
        ->capture_default_str();
    app->add_option("--blur-kernel-px", blur_px, "Gaussian blur size [px]")
        ->capture_default_str();
    app->add_option("--blur-sigma-px", blur_sigma_px, "Gaussian blur sigma [px]")
        ->capture_default_str();
  }

  FillParams params() const {
    FillParams p;
    p.initial.size = initial_px;
    p.initial.shape = initial_shape == "full"      ? KernelShape::Full
                      : initial_shape == "cross"   ? KernelShape::Cross
                                                   : KernelShape::Diamond;
    p.closing_size = closing_px;
    p.hole_size = hole_px;
    p.hole_iterations = hole_iterations;
    p.blur_size = blur_px;
    p.blur_sigma = blur_sigma_px;
    p.validate();
    return p;
  }
};

struct SgmFlags {
  int census_px = 5;
  int dmax_px = 64;
  std::uint32_t p1 = 10;
  std::uint32_t p2 = 120;
  double lr_tolerance_px = 1.0;

  void attach(CLI::App* app) {
    app->add_option("--census-window-px", census_px, "census window size [px]")
        ->capture_default_str();
    app->add_option("--max-disparity-px", dmax_px, "largest disparity searched [px]")
        ->capture_default_str();
    app->add_option("--p1", p1, "small disparity-change penalty [cost units]")
        ->capture_default_str();
    app->add_option("--p2", p2, "large disparity-change penalty [cost units]")
        ->capture_default_str();
    app->add_option("--lr-tolerance-px", lr_tolerance_px,
                    "left-right consistency tolerance [px]")
        ->capture_default_str();
  }

  SgmParams params() const {
    SgmParams p;
    p.census_window = census_px;
    p.dmax = dmax_px;
    p.p1 = p1;
    p.p2 = p2;
    p.lr_tolerance = lr_tolerance_px;
    p.validate();
    return p;
  }
};

StereoRig make_rig(double fx_px, double baseline_m, int width, int height) {
  StereoRig rig;
  rig.intrinsics = {fx_px, fx_px, width / 2.0, height / 2.0};
  rig.baseline_m = baseline_m;
  rig.validate();
  return rig;
}

std::vector<fs::path> png_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw ValidationError("not a directory: " + dir.string());
  }
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const ConfigError*>(&e)) {
    return 1;
  }
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-to-dense depth completion tools"};
  app.set_config("--config", "",
                 "INI/TOML file with one [section] per subcommand; command-line "
                 "flags override it");
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  // fill -------------------------------------------------------------------
  auto* fill = app.add_subcommand("fill", "densify a sparse 16-bit depth PNG");
  fs::path fill_in, fill_out;
  double fill_max_depth = kMaxEncodableDepth;
  FillFlags fill_flags;
  fill->add_option("--input", fill_in, "sparse depth PNG (uint16 / 256 = m)")
      ->required()
      ->check(CLI::ExistingFile);
  fill->add_option("--output", fill_out, "dense depth PNG")->required();
  fill->add_option("--max-depth-m", fill_max_depth,
                   "depth bound; larger input values are dropped [m]")
      ->capture_default_str();
  fill_flags.attach(fill);

  // sgm --------------------------------------------------------------------
  auto* sgm = app.add_subcommand("sgm", "semi-global matching on a rectified pair");
  fs::path sgm_left, sgm_right, sgm_depth, sgm_mask;
  double sgm_fx = 0, sgm_baseline = 0, sgm_max_depth = kMaxEncodableDepth;
  SgmFlags sgm_flags;
  sgm->add_option("--left", sgm_left, "left image")->required()->check(CLI::ExistingFile);
  sgm->add_option("--right", sgm_right, "right image")->required()->check(CLI::ExistingFile);
  sgm->add_option("--fx-px", sgm_fx, "focal length [px]")->required();
  sgm->add_option("--baseline-m", sgm_baseline, "stereo baseline [m]")->required();
  sgm->add_option("--max-depth-m", sgm_max_depth, "depth bound [m]")
      ->capture_default_str();
  sgm->add_option("--out-depth", sgm_depth, "depth PNG")->required();
  sgm->add_option("--out-mask", sgm_mask, "validity mask PNG (255 = valid)")->required();
  sgm_flags.attach(sgm);

  // sample -----------------------------------------------------------------
  auto* sample = app.add_subcommand("sample", "keep a seeded random subset of depth pixels");
  fs::path sample_in, sample_out;
  std::size_t sample_count = 0;
  double sample_fraction = 0;
  std::uint64_t sample_seed = 0;
  sample->add_option("--input", sample_in, "depth PNG")->required()->check(CLI::ExistingFile);
  sample->add_option("--output", sample_out, "sparsified depth PNG")->required();
  auto* opt_count = sample->add_option("--count", sample_count, "pixels to keep [count]");
  auto* opt_frac =
      sample->add_option("--fraction", sample_fraction, "share of valid pixels to keep [0..1]");
  opt_count->excludes(opt_frac);
  opt_frac->excludes(opt_count);
  sample->add_option("--seed", sample_seed, "RNG seed [integer]")->capture_default_str();

  // train ------------------------------------------------------------------
  auto* train = app.add_subcommand("train", "train the fusion network on a manifest");
  fs::path train_manifest, train_holdout, train_out, train_resume, train_log;
  std::string preset = "tiny";
  TrainConfig tc;
  FillFlags train_fill;
  SgmFlags train_sgm;
  double train_fx = 0, train_baseline = 0;
  bool primary_l1 = false;
  train->add_option("--manifest", train_manifest, "training manifest")
      ->required()
      ->check(CLI::ExistingFile);
  train->add_option("--holdout-manifest", train_holdout,
                    "held-out manifest evaluated after each epoch")
      ->check(CLI::ExistingFile);
  train->add_option("--out-dir", train_out, "checkpoint directory")->required();
  train->add_option("--resume", train_resume, "trainer checkpoint to continue from")
      ->check(CLI::ExistingFile);
  train->add_option("--log", train_log, "step log file (default: stdout)");
  train->add_option("--preset", preset, "network size: tiny or full")
      ->check(CLI::IsMember({"tiny", "full"}))
      ->capture_default_str();
  train->add_option("--epochs", tc.epochs, "epochs [count]")->capture_default_str();
  train->add_option("--batch-size", tc.batch_size, "samples per step [count]")
      ->capture_default_str();
  train->add_option("--learning-rate", tc.learning_rate, "initial ADAM step size [dimensionless]")
      ->capture_default_str();
  train->add_option("--weight-decay", tc.weight_decay, "L2 coefficient [dimensionless]")
      ->capture_default_str();
  train->add_option("--lr-decay-factor", tc.lr_decay_factor,
                    "learning-rate multiplier per decay interval [dimensionless]")
      ->capture_default_str();
  train->add_option("--lr-decay-every-epochs", tc.lr_decay_every_epochs,
                    "decay interval [epochs]")
      ->capture_default_str();
  train->add_option("--alpha", tc.weights.alpha, "primary loss weight [dimensionless]")
      ->capture_default_str();
  train->add_option("--beta", tc.weights.beta, "stereo loss weight [dimensionless]")
      ->capture_default_str();
  train->add_option("--gamma", tc.weights.gamma, "smoothness loss weight [dimensionless]")
      ->capture_default_str();
  train->add_flag("--primary-l1", primary_l1, "absolute instead of squared primary error");
  train->add_flag("--stereo-exclude-gt", tc.loss.stereo_exclude_gt,
                  "leave ground-truth pixels out of the stereo term");
  train->add_option("--seed", tc.seed, "RNG seed [integer]")->capture_default_str();
  train->add_option("--crop-height-px", tc.crop_height, "training crop height [px]")
      ->capture_default_str();
  train->add_option("--crop-width-px", tc.crop_width, "training crop width [px]")
      ->capture_default_str();
  train->add_option("--fx-px", train_fx, "focal length for stereo targets [px]");
  train->add_option("--baseline-m", train_baseline, "stereo baseline [m]");
  train->add_option("--cache-dir", tc.cache_dir, "SGM result cache directory");
  train->add_option("--jobs", tc.jobs, "preprocessing threads [count]")
      ->capture_default_str();
  train_fill.attach(train);
  train_sgm.attach(train);

  // predict ----------------------------------------------------------------
  auto* predict = app.add_subcommand("predict", "run a trained model");
  fs::path pred_ckpt, pred_rgb, pred_sparse, pred_out, pred_manifest, pred_dir;
  int pred_jobs = 1;
  FillFlags pred_fill;
  predict->add_option("--checkpoint", pred_ckpt, "model or trainer checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  auto* o_rgb = predict->add_option("--rgb", pred_rgb, "RGB image")->check(CLI::ExistingFile);
  auto* o_sparse =
      predict->add_option("--sparse", pred_sparse, "sparse depth PNG")->check(CLI::ExistingFile);
  auto* o_out = predict->add_option("--output", pred_out, "predicted depth PNG");
  auto* o_manifest = predict->add_option("--manifest", pred_manifest,
                                         "predict every record of a manifest")
                         ->check(CLI::ExistingFile);
  auto* o_dir = predict->add_option("--out-dir", pred_dir,
                                    "output directory for --manifest (one PNG per "
                                    "record, named after the RGB file)");
  predict->add_option("--jobs", pred_jobs, "parallel images [count]")->capture_default_str();
  o_rgb->needs(o_sparse, o_out);
  o_manifest->needs(o_dir);
  o_manifest->excludes(o_rgb);
  pred_fill.attach(predict);

  // eval -------------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "score predictions against ground truth");
  fs::path eval_pred, eval_gt;
  double eval_max_depth = kMaxEncodableDepth;
  int eval_jobs = 1;
  std::string eval_format = "both";
  eval->add_option("--pred-dir", eval_pred, "predicted depth PNGs")->required();
  eval->add_option("--gt-dir", eval_gt, "ground-truth depth PNGs (matched by file name)")
      ->required();
  eval->add_option("--max-depth-m", eval_max_depth,
                   "ground truth beyond this is ignored [m]")
      ->capture_default_str();
  eval->add_option("--format", eval_format, "table, kv or both")
      ->check(CLI::IsMember({"table", "kv", "both"}))
      ->capture_default_str();
  eval->add_option("--jobs", eval_jobs, "parallel images [count]")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*fill) {
      const DepthMap in = read_depth_png16(fill_in).rebound(fill_max_depth, true);
      write_depth_png16(morph_fill(in, fill_flags.params()), fill_out);
    } else if (*sgm) {
      const IntensityImage left = read_rgb8(sgm_left);
      const IntensityImage right = read_rgb8(sgm_right);
      const StereoRig rig = make_rig(sgm_fx, sgm_baseline, left.width(), left.height());
      const StereoEstimate est =
          sgm_stereo_depth(left, right, rig, sgm_flags.params(), sgm_max_depth);
      write_depth_png16(est.depth, sgm_depth);
      write_mask_png8(est.mask, sgm_mask);
    } else if (*sample) {
      if (opt_count->count() == 0 && opt_frac->count() == 0) {
        throw UsageError("sample needs --count or --fraction");
      }
      const DepthMap in = read_depth_png16(sample_in);
      const SampleSpec spec = opt_count->count() ? SampleSpec::count(sample_count)
                                                 : SampleSpec::fraction(sample_fraction);
      write_depth_png16(sparsify(in, spec, sample_seed), sample_out);
    } else if (*train) {
      tc.loss.primary_norm = primary_l1 ? PrimaryNorm::L1 : PrimaryNorm::L2;
      tc.fill = train_fill.params();
      tc.sgm = train_sgm.params();
      tc.checkpoint_dir = train_out;
      const DatasetManifest manifest = load_manifest(train_manifest);
      std::optional<DatasetManifest> holdout;
      if (!train_holdout.empty()) holdout = load_manifest(train_holdout);
      if (train_fx > 0 || train_baseline > 0) {
        const IntensityImage probe = read_rgb8(manifest.records.at(0).rgb_path);
        tc.rig = make_rig(train_fx, train_baseline, probe.width(), probe.height());
      }
      DFuseNetConfig mc = preset == "tiny" ? DFuseNetConfig::tiny(manifest.max_depth)
                                           : DFuseNetConfig{};
      mc.max_depth = manifest.max_depth;

      std::ofstream log_file;
      std::ostream* log = &std::cout;
      if (!train_log.empty()) {
        log_file.open(train_log);
        if (!log_file) throw ValidationError("cannot write " + train_log.string());
        log = &log_file;
      }
      Trainer trainer(mc, tc, log);
      if (!train_resume.empty()) trainer.load_checkpoint(train_resume);
      trainer.set_data(manifest, holdout ? &*holdout : nullptr);
      trainer.train();
      fs::create_directories(train_out);
      trainer.save_checkpoint(train_out / "final.ckpt");
    } else if (*predict) {
      DFuseNet<float> model = load_model(pred_ckpt);
      const FillParams fp = pred_fill.params();
      if (o_manifest->count()) {
        const DatasetManifest m = load_manifest(pred_manifest);
        fs::create_directories(pred_dir);
        parallel_for(m.records.size(), pred_jobs, [&](std::size_t i) {
          const auto& r = m.records[i];
          const DepthMap sparse = read_depth_png16(r.sparse_depth_path);
          const DepthMap out = predict_depth(model, read_rgb8(r.rgb_path), sparse, fp);
          write_depth_png16(out, pred_dir / (r.rgb_path.stem().string() + ".png"));
        });
      } else {
        if (o_rgb->count() == 0) throw UsageError("predict needs --rgb or --manifest");
        const DepthMap out = predict_depth(model, read_rgb8(pred_rgb),
                                           read_depth_png16(pred_sparse), fp);
        write_depth_png16(out, pred_out);
      }
    } else if (*eval) {
      const auto gts = png_files(eval_gt);
      if (gts.empty()) throw ValidationError("no PNG files in " + eval_gt.string());
      std::vector<MetricsReport> reports(gts.size());
      parallel_for(gts.size(), eval_jobs, [&](std::size_t i) {
        const fs::path pred_path = eval_pred / gts[i].filename();
        if (!fs::exists(pred_path)) {
          throw ValidationError("no prediction for " + gts[i].filename().string());
        }
        const DepthMap gt = read_depth_png16(gts[i]).rebound(eval_max_depth, true);
        reports[i] = compute_metrics(read_depth_png16(pred_path), gt);
      });
      const MetricsReport total = aggregate_metrics(reports);
      if (eval_format != "kv") std::cout << total.to_table();
      if (eval_format != "table") std::cout << total.to_key_values();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  }
  return 0;
}
