#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dfuse/archive.hpp"
#include "dfuse/autodiff.hpp"
#include "dfuse/core.hpp"
#include "dfuse/eval.hpp"
#include "dfuse/fill.hpp"
#include "dfuse/imageio.hpp"
#include "dfuse/loss.hpp"
#include "dfuse/network.hpp"
#include "dfuse/stereo.hpp"

namespace dfuse {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  bool operator==(const AdamOptions&) const = default;
};

/// First/second moment buffers, one per parameter, plus the step count.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t t = 0;
};

/// One bias-corrected ADAM update. Weight decay is added to the gradient
/// (coupled L2). Parameters with no gradient buffer are treated as having a
/// zero gradient. Arithmetic runs in double regardless of T.
template <typename T>
void adam_step(std::vector<ad::Parameter<T>>& params, AdamState<T>& state,
               double lr, double weight_decay, const AdamOptions& options = {});

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  int batch_size = 2;
  int epochs = 1;
  double lr_decay_factor = 0.9;
  int lr_decay_every_epochs = 5;
  std::uint64_t seed = 0;
  LossWeights weights;
  LossOptions loss;
  AdamOptions adam;
  /// Random training crop; 0 keeps the full image (all images must then share
  /// one size).
  int crop_height = 64;
  int crop_width = 256;
  FillParams fill;
  SgmParams sgm;
  /// Needed for stereo supervision; without it the stereo term stays empty.
  std::optional<StereoRig> rig;
  /// On-disk SGM cache; empty keeps results in memory only.
  std::filesystem::path cache_dir;
  /// Per-epoch checkpoints land here; empty disables them.
  std::filesystem::path checkpoint_dir;
  /// Worker threads for sample preparation (fill, SGM).
  int jobs = 1;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
  bool operator==(const TrainConfig&) const = default;
};

/// initial * factor^floor(epoch / every).
double schedule_lr(int epoch, const TrainConfig& config);

/// One raw example. `right` is only consulted when stereo supervision is on.
struct TrainingSample {
  IntensityImage rgb;
  DepthMap sparse;
  DepthMap gt;
  std::optional<IntensityImage> right;
};

/// What the optimizer consumes: filled and normalized input, targets, and
/// the optional SGM estimate.
struct PreparedSample {
  IntensityImage rgb;
  NormalizedDepth input;
  DepthMap gt;
  std::optional<DepthMap> stereo_depth;
  std::optional<ValidMask> stereo_mask;
};

struct StepLog {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  double primary = 0.0;
  double stereo = 0.0;
  double smooth = 0.0;
  double total = 0.0;
  bool stereo_empty = true;

  /// "step=... epoch=... lr=... primary=... stereo=... smooth=... total=..."
  std::string line() const;
};

/// Loads every record of a manifest. Records that fail to load are skipped
/// and reported through `warn`.
std::vector<TrainingSample> load_samples(
    const DatasetManifest& manifest, bool with_right,
    std::ostream* warn = nullptr);

/// Owns the model, optimizer state and data order. Deterministic for a given
/// seed; checkpoints capture everything needed to continue bit-exact.
class Trainer {
 public:
  Trainer(DFuseNetConfig model_config, TrainConfig config,
          std::ostream* log = nullptr);

  DFuseNet<float>& model() { return model_; }
  const DFuseNet<float>& model() const { return model_; }
  const TrainConfig& config() const { return config_; }
  int epoch() const { return epoch_; }
  std::int64_t step() const { return step_; }
  std::size_t sgm_invocations() const { return sgm_invocations_; }

  /// Preprocesses training and held-out samples. Stereo targets are computed
  /// (or fetched from the cache) only when beta > 0.
  void set_data(const std::vector<TrainingSample>& train,
                const std::vector<TrainingSample>& holdout = {});
  void set_data(const DatasetManifest& train,
                const DatasetManifest* holdout = nullptr);

  const std::vector<PreparedSample>& train_samples() const { return train_; }

  /// One shuffled pass over the training samples.
  std::vector<StepLog> run_epoch();
  /// Metrics of the current model on the held-out samples, if any.
  std::optional<MetricsReport> evaluate();
  /// Runs epochs until config().epochs are complete, checkpointing and
  /// evaluating after each.
  void train();

  TensorArchive checkpoint() const;
  void restore(const TensorArchive& archive);
  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

 private:
  PreparedSample prepare(const TrainingSample& sample, std::size_t index);
  StepLog train_step(const std::vector<std::size_t>& batch, double lr);

  DFuseNetConfig model_config_;
  TrainConfig config_;
  std::ostream* log_;
  DFuseNet<float> model_;
  AdamState<float> adam_;
  std::mt19937_64 rng_;
  int epoch_ = 0;
  std::int64_t step_ = 0;
  std::size_t sgm_invocations_ = 0;
  std::vector<PreparedSample> train_;
  std::vector<PreparedSample> holdout_;
};

/// Convenience wrapper: load manifests, train, return the trainer.
Trainer train_loop(const DFuseNetConfig& model_config,
                   const DatasetManifest& train, const TrainConfig& config,
                   const DatasetManifest* holdout = nullptr,
                   std::ostream* log = nullptr);

/// Reads a model from a trainer checkpoint or a bare model archive.
DFuseNet<float> load_model(const std::filesystem::path& path);

/// fill -> normalize -> forward (eval mode). The sparse map is rebounded to
/// the model's depth bound, dropping anything beyond it.
DepthMap predict_depth(DFuseNet<float>& model, const IntensityImage& rgb,
                       const DepthMap& sparse, const FillParams& fill = {});

/// 64-bit FNV-1a over raw bytes, chained through `seed`.
std::uint64_t fnv1a(const void* data, std::size_t size,
                    std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace dfuse
