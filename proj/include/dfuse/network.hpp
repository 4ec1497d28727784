#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dfuse/archive.hpp"
#include "dfuse/autodiff.hpp"
#include "dfuse/core.hpp"
#include "dfuse/fill.hpp"

namespace dfuse {

/// Layer widths and pyramid windows. The graph shape is fixed: an RGB branch
/// (two 3x3 convs + residual blocks), a depth branch (few large-kernel
/// convs), one SPP stack per branch, a fusion block that dips to 1/4
/// resolution and comes back to 1/2, a three-stage decoder, and a 1x1 head
/// over the upsampled decoder taps.
struct DFuseNetConfig {
  int rgb_channels = 32;
  int num_res_blocks = 4;
  /// 1-based index of the residual block whose output joins the fusion volume.
  int fusion_res_block = 2;
  std::vector<int> depth_channels{32, 32, 32};
  std::vector<int> depth_kernels{7, 5, 5};
  int spp_channels = 16;
  std::vector<int> spp_windows{64, 32, 16, 8};
  /// strided conv (to 1/4), conv, 2x transposed conv (back to 1/2).
  std::vector<int> fusion_channels{128, 96, 64};
  /// conv at 1/2, 2x transposed conv to full, conv at full.
  std::vector<int> decoder_channels{64, 32, 32};
  double max_depth = 85.0;
  /// Replicate-pad inputs up to the next valid size and crop the output back.
  bool pad_to_fit = true;

  /// Desk-scale preset: 8/16-channel stages, pyramid windows sized for
  /// 64-pixel-high crops.
  static DFuseNetConfig tiny(double max_depth = 85.0);

  void validate() const;
  /// Input height and width must be multiples of this.
  int input_divisor() const;
  /// Channels entering the fusion block.
  int fusion_input_channels() const;

  std::string to_json() const;
  static DFuseNetConfig from_json(const std::string& text);

  bool operator==(const DFuseNetConfig&) const = default;
};

/// Pools at every window (window-sized stride), applies the matching 1x1
/// conv, resamples back to the feature size and stacks the result after the
/// input features. convs[i] = {weight, bias} for windows[i].
template <typename T>
ad::Tensor<T> spp_forward(
    const ad::Tensor<T>& features, const std::vector<int>& windows,
    ad::PoolKind kind,
    const std::vector<std::pair<ad::Tensor<T>, ad::Tensor<T>>>& convs);

template <typename T>
class DFuseNet {
 public:
  DFuseNet(DFuseNetConfig config, std::uint64_t seed);

  const DFuseNetConfig& config() const { return config_; }

  /// rgb: (N, 3, H, W) in [0, 1]; depth: (N, 1, H, W) normalized filled
  /// depth in [0, 1]. Returns (N, 1, H, W) depth in meters, strictly inside
  /// (0, max_depth).
  ad::Tensor<T> forward(const ad::Tensor<T>& rgb, const ad::Tensor<T>& depth,
                        ad::Mode mode);

  std::vector<ad::Parameter<T>>& parameters() { return params_; }
  const std::vector<ad::Parameter<T>>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  void zero_grad();

  /// Parameters and batch-norm running statistics, prefixed "param/" and
  /// "buffer/". The config travels in the metadata.
  TensorArchive to_archive() const;
  /// Throws IncompatibleCheckpoint naming the first mismatched entry.
  void load_archive(const TensorArchive& archive);

  /// Copies weights and statistics from a model with the same config.
  template <typename U>
  void copy_from(const DFuseNet<U>& other);

  struct Conv {
    ad::Tensor<T> weight;
    ad::Tensor<T> bias;  // undefined when a batch norm follows
    int stride = 1;
    int padding = 0;
    bool transposed = false;
  };
  struct Norm {
    std::string name;
    ad::Tensor<T> gamma;
    ad::Tensor<T> beta;
    ad::RunningStats<T> stats;
  };

  const std::vector<Norm>& norms() const { return norms_; }
  std::vector<Norm>& norms() { return norms_; }

 private:
  int add_conv(const std::string& name, int in, int out, int k, int stride,
               int padding, bool transposed, bool with_bias);
  int add_norm(const std::string& name, int channels);
  ad::Tensor<T> apply_conv(int idx, const ad::Tensor<T>& x) const;
  ad::Tensor<T> conv_bn_relu(int conv, int norm, const ad::Tensor<T>& x,
                             ad::Mode mode, bool relu = true);
  ad::Tensor<T> forward_fitted(const ad::Tensor<T>& rgb,
                               const ad::Tensor<T>& depth, ad::Mode mode);

  DFuseNetConfig config_;
  std::uint64_t seed_;
  std::vector<ad::Parameter<T>> params_;
  std::vector<Conv> convs_;
  std::vector<Norm> norms_;

  // Layer indices into convs_/norms_.
  struct Stage {
    int conv;
    int norm;
  };
  std::vector<Stage> rgb_stem_;
  std::vector<std::pair<Stage, Stage>> res_blocks_;
  std::vector<Stage> depth_stem_;
  std::vector<int> rgb_spp_;
  std::vector<int> depth_spp_;
  std::vector<Stage> fusion_;
  std::vector<Stage> decoder_;
  int head_ = -1;

  template <typename U>
  friend class DFuseNet;
};

/// (N, 3, H, W) batch from equally sized images.
template <typename T>
ad::Tensor<T> rgb_batch(std::span<const IntensityImage> images);

/// (N, 1, H, W) batch from equally sized normalized depth rasters.
template <typename T>
ad::Tensor<T> depth_batch(std::span<const NormalizedDepth> depths);

/// Splits an (N, 1, H, W) prediction into depth maps.
template <typename T>
std::vector<DepthMap> to_depth_maps(const ad::Tensor<T>& prediction,
                                    double max_depth);

}  // namespace dfuse
