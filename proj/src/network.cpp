#include "dfuse/network.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "json.hpp"

#include "dfuse/error.hpp"

namespace dfuse {

using ad::Mode;
using ad::PoolKind;
using ad::Shape;
using ad::Tensor;

// ---------------------------------------------------------------------------
// Config

DFuseNetConfig DFuseNetConfig::tiny(double max_depth) {
  DFuseNetConfig c;
  c.rgb_channels = 8;
  c.depth_channels = {8, 8, 8};
  c.spp_channels = 4;
  c.spp_windows = {16, 8, 4, 2};
  c.fusion_channels = {16, 16, 16};
  c.decoder_channels = {16, 8, 8};
  c.max_depth = max_depth;
  return c;
}

void DFuseNetConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) throw ConfigError(std::string(what) + " must be >= 1");
  };
  positive(rgb_channels, "rgb_channels");
  positive(num_res_blocks, "num_res_blocks");
  positive(spp_channels, "spp_channels");
  if (fusion_res_block < 1 || fusion_res_block > num_res_blocks) {
    throw ConfigError("fusion_res_block must name one of the residual blocks");
  }
  if (depth_channels.empty() || depth_channels.size() != depth_kernels.size()) {
    throw ConfigError("depth branch needs one kernel size per conv layer");
  }
  for (int c : depth_channels) positive(c, "depth channel count");
  for (int k : depth_kernels) {
    if (k < 1 || k % 2 == 0) throw ConfigError("depth kernels must be odd");
  }
  if (spp_windows.empty()) throw ConfigError("spp_windows must not be empty");
  for (std::size_t i = 0; i < spp_windows.size(); ++i) {
    positive(spp_windows[i], "spp window");
    if (i > 0 && spp_windows[i] >= spp_windows[i - 1]) {
      throw ConfigError("spp_windows must be strictly decreasing");
    }
  }
  if (fusion_channels.size() != 3) {
    throw ConfigError("fusion block has exactly three convolutions");
  }
  if (decoder_channels.size() != 3) {
    throw ConfigError("decoder has exactly three stages");
  }
  for (int c : fusion_channels) positive(c, "fusion channel count");
  for (int c : decoder_channels) positive(c, "decoder channel count");
  if (!(max_depth > 0.0) || !std::isfinite(max_depth)) {
    throw ConfigError("max_depth must be positive");
  }
}

int DFuseNetConfig::input_divisor() const {
  // Branches run at 1/2 resolution; there the pyramid windows must tile the
  // map and the fusion stride-2 conv needs an even size.
  int l = 2;
  for (int w : spp_windows) l = std::lcm(l, w);
  return 2 * l;
}

int DFuseNetConfig::fusion_input_channels() const {
  const int per_scale = spp_channels * static_cast<int>(spp_windows.size());
  return rgb_channels + (rgb_channels + per_scale) +
         (depth_channels.back() + per_scale);
}

std::string DFuseNetConfig::to_json() const {
  nlohmann::json j;
  j["rgb_channels"] = rgb_channels;
  j["num_res_blocks"] = num_res_blocks;
  j["fusion_res_block"] = fusion_res_block;
  j["depth_channels"] = depth_channels;
  j["depth_kernels"] = depth_kernels;
  j["spp_channels"] = spp_channels;
  j["spp_windows"] = spp_windows;
  j["fusion_channels"] = fusion_channels;
  j["decoder_channels"] = decoder_channels;
  j["max_depth"] = max_depth;
  j["pad_to_fit"] = pad_to_fit;
  return j.dump();
}

DFuseNetConfig DFuseNetConfig::from_json(const std::string& text) {
  DFuseNetConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.rgb_channels = j.at("rgb_channels");
    c.num_res_blocks = j.at("num_res_blocks");
    c.fusion_res_block = j.at("fusion_res_block");
    c.depth_channels = j.at("depth_channels").get<std::vector<int>>();
    c.depth_kernels = j.at("depth_kernels").get<std::vector<int>>();
    c.spp_channels = j.at("spp_channels");
    c.spp_windows = j.at("spp_windows").get<std::vector<int>>();
    c.fusion_channels = j.at("fusion_channels").get<std::vector<int>>();
    c.decoder_channels = j.at("decoder_channels").get<std::vector<int>>();
    c.max_depth = j.at("max_depth");
    c.pad_to_fit = j.at("pad_to_fit");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad network config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// SPP

template <typename T>
Tensor<T> spp_forward(const Tensor<T>& features, const std::vector<int>& windows,
                      PoolKind kind,
                      const std::vector<std::pair<Tensor<T>, Tensor<T>>>& convs) {
  if (convs.size() != windows.size()) {
    throw ConfigError("spp needs one 1x1 conv per pyramid window");
  }
  const Shape s = features.shape();
  std::vector<Tensor<T>> stack{features};
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const int w = windows[i];
    if (w < 1 || s.h % w != 0 || s.w % w != 0) {
      throw ConfigError("spp window " + std::to_string(w) +
                        " does not tile a " + std::to_string(s.h) + "x" +
                        std::to_string(s.w) +
                        " feature map; height and width must be multiples of " +
                        std::to_string(w));
    }
    auto pooled = ad::pool(features, kind, w, w);
    auto mixed = ad::conv2d(pooled, convs[i].first, convs[i].second);
    stack.push_back(ad::upsample_bilinear(mixed, s.h, s.w));
  }
  return ad::concat_channels(stack);
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
DFuseNet<T>::DFuseNet(DFuseNetConfig config, std::uint64_t seed)
    : config_(std::move(config)), seed_(seed) {
  config_.validate();
  const auto& c = config_;
  const int rc = c.rgb_channels;

  rgb_stem_.push_back({add_conv("rgb_branch.conv1", 3, rc, 3, 2, 1, false, false),
                       add_norm("rgb_branch.bn1", rc)});
  rgb_stem_.push_back({add_conv("rgb_branch.conv2", rc, rc, 3, 1, 1, false, false),
                       add_norm("rgb_branch.bn2", rc)});
  for (int b = 1; b <= c.num_res_blocks; ++b) {
    const std::string p = "rgb_branch.res" + std::to_string(b);
    Stage first{add_conv(p + ".conv1", rc, rc, 3, 1, 1, false, false),
                add_norm(p + ".bn1", rc)};
    Stage second{add_conv(p + ".conv2", rc, rc, 3, 1, 1, false, false),
                 add_norm(p + ".bn2", rc)};
    res_blocks_.emplace_back(first, second);
  }

  int in = 1;
  for (std::size_t i = 0; i < c.depth_channels.size(); ++i) {
    const int k = c.depth_kernels[i];
    const std::string p = "depth_branch.conv" + std::to_string(i + 1);
    depth_stem_.push_back(
        {add_conv(p, in, c.depth_channels[i], k, i == 0 ? 2 : 1, k / 2, false, false),
         add_norm("depth_branch.bn" + std::to_string(i + 1), c.depth_channels[i])});
    in = c.depth_channels[i];
  }

  for (int w : c.spp_windows) {
    rgb_spp_.push_back(add_conv("rgb_branch.spp.scale" + std::to_string(w), rc,
                                c.spp_channels, 1, 1, 0, false, true));
  }
  for (int w : c.spp_windows) {
    depth_spp_.push_back(add_conv("depth_branch.spp.scale" + std::to_string(w),
                                  c.depth_channels.back(), c.spp_channels, 1, 1,
                                  0, false, true));
  }

  const auto& f = c.fusion_channels;
  fusion_.push_back({add_conv("fusion.conv1", c.fusion_input_channels(), f[0], 3, 2,
                              1, false, false),
                     add_norm("fusion.bn1", f[0])});
  fusion_.push_back({add_conv("fusion.conv2", f[0], f[1], 3, 1, 1, false, false),
                     add_norm("fusion.bn2", f[1])});
  fusion_.push_back({add_conv("fusion.deconv3", f[1], f[2], 2, 2, 0, true, false),
                     add_norm("fusion.bn3", f[2])});

  const auto& d = c.decoder_channels;
  decoder_.push_back({add_conv("decoder.conv1", f[2], d[0], 3, 1, 1, false, false),
                      add_norm("decoder.bn1", d[0])});
  decoder_.push_back({add_conv("decoder.deconv2", d[0], d[1], 2, 2, 0, true, false),
                      add_norm("decoder.bn2", d[1])});
  decoder_.push_back({add_conv("decoder.conv3", d[1], d[2], 3, 1, 1, false, false),
                      add_norm("decoder.bn3", d[2])});

  head_ = add_conv("head.conv", d[0] + d[1] + d[2], 1, 1, 1, 0, false, true);
}

template <typename T>
int DFuseNet<T>::add_conv(const std::string& name, int in, int out, int k,
                          int stride, int padding, bool transposed,
                          bool with_bias) {
  // Kaiming-style fan-in scaling from a generator seeded per layer, so adding
  // a layer never perturbs the others.
  std::seed_seq seq{static_cast<std::uint32_t>(seed_),
                    static_cast<std::uint32_t>(seed_ >> 32),
                    static_cast<std::uint32_t>(convs_.size())};
  std::mt19937_64 rng(seq);
  const double fan_in =
      transposed ? static_cast<double>(in) * k * k / (stride * stride)
                 : static_cast<double>(in) * k * k;
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));

  const Shape ws = transposed ? Shape{in, out, k, k} : Shape{out, in, k, k};
  std::vector<T> w(ws.numel());
  for (auto& v : w) v = static_cast<T>(normal(rng));

  Conv conv;
  conv.weight = Tensor<T>::from(ws, std::move(w), true);
  conv.stride = stride;
  conv.padding = padding;
  conv.transposed = transposed;
  params_.push_back({name + ".weight", conv.weight});
  if (with_bias) {
    conv.bias = Tensor<T>::zeros(Shape{1, out, 1, 1}, true);
    params_.push_back({name + ".bias", conv.bias});
  }
  convs_.push_back(std::move(conv));
  return static_cast<int>(convs_.size()) - 1;
}

template <typename T>
int DFuseNet<T>::add_norm(const std::string& name, int channels) {
  Norm n{name, Tensor<T>::full(Shape{1, channels, 1, 1}, T(1), true),
         Tensor<T>::zeros(Shape{1, channels, 1, 1}, true),
         ad::RunningStats<T>(channels)};
  params_.push_back({name + ".gamma", n.gamma});
  params_.push_back({name + ".beta", n.beta});
  norms_.push_back(std::move(n));
  return static_cast<int>(norms_.size()) - 1;
}

template <typename T>
Tensor<T> DFuseNet<T>::apply_conv(int idx, const Tensor<T>& x) const {
  const Conv& c = convs_[idx];
  const ad::Conv2dOptions opt{c.stride, c.padding};
  return c.transposed ? ad::conv_transpose2d(x, c.weight, c.bias, opt)
                      : ad::conv2d(x, c.weight, c.bias, opt);
}

template <typename T>
Tensor<T> DFuseNet<T>::conv_bn_relu(int conv, int norm, const Tensor<T>& x,
                                    Mode mode, bool relu) {
  auto& n = norms_[norm];
  auto y = ad::batch_norm(apply_conv(conv, x), n.gamma, n.beta, n.stats, mode);
  return relu ? ad::relu(y) : y;
}

namespace {

// Final multiply by the depth bound, held strictly below it. Scaling by a
// power of two commutes with the clamp, so doubling the bound doubles the
// output exactly.
template <typename T>
Tensor<T> rescale_open(const Tensor<T>& x, T max_depth) {
  const T ceiling = std::nextafter(max_depth, T(0));
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::min(x.values()[i] * max_depth, ceiling);
  }
  auto xn = x.node();
  return ad::make_result<T>(
      "rescale", x.shape(), std::move(out), {x},
      [xn, max_depth, ceiling](ad::Node<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (self.value[i] < ceiling) xn->grad[i] += self.grad[i] * max_depth;
        }
      });
}

}  // namespace

template <typename T>
Tensor<T> DFuseNet<T>::forward(const Tensor<T>& rgb, const Tensor<T>& depth,
                               Mode mode) {
  const Shape rs = rgb.shape();
  const Shape ds = depth.shape();
  if (rs.c != 3 || ds.c != 1 || rs.n != ds.n || rs.h != ds.h || rs.w != ds.w) {
    throw ShapeError("forward expects rgb (N,3,H,W) and depth (N,1,H,W), got " +
                     rs.str() + " and " + ds.str());
  }
  for (T v : depth.values()) {
    if (!(v >= T(0) && v <= T(1))) {
      throw ShapeError("normalized depth input must lie in [0, 1]");
    }
  }
  const int div = config_.input_divisor();
  if (rs.h % div == 0 && rs.w % div == 0) return forward_fitted(rgb, depth, mode);
  if (!config_.pad_to_fit) {
    throw ConfigError("input " + std::to_string(rs.h) + "x" +
                      std::to_string(rs.w) +
                      " does not fit the network; height and width must be "
                      "multiples of " +
                      std::to_string(div));
  }
  const int ph = (rs.h + div - 1) / div * div - rs.h;
  const int pw = (rs.w + div - 1) / div * div - rs.w;
  auto out = forward_fitted(ad::pad_replicate(rgb, 0, ph, 0, pw),
                            ad::pad_replicate(depth, 0, ph, 0, pw), mode);
  return ad::crop(out, 0, 0, rs.h, rs.w);
}

template <typename T>
Tensor<T> DFuseNet<T>::forward_fitted(const Tensor<T>& rgb,
                                      const Tensor<T>& depth, Mode mode) {
  const Shape in = rgb.shape();
  const auto& c = config_;

  // RGB branch.
  auto x = rgb;
  for (const Stage& s : rgb_stem_) x = conv_bn_relu(s.conv, s.norm, x, mode);
  Tensor<T> res_tap;
  for (std::size_t b = 0; b < res_blocks_.size(); ++b) {
    const auto& [first, second] = res_blocks_[b];
    auto y = conv_bn_relu(first.conv, first.norm, x, mode);
    y = conv_bn_relu(second.conv, second.norm, y, mode, false);
    x = ad::relu(ad::add(y, x));
    if (static_cast<int>(b) + 1 == c.fusion_res_block) res_tap = x;
  }
  std::vector<std::pair<Tensor<T>, Tensor<T>>> rgb_spp;
  for (int i : rgb_spp_) rgb_spp.emplace_back(convs_[i].weight, convs_[i].bias);
  auto rgb_features = spp_forward(x, c.spp_windows, PoolKind::Avg, rgb_spp);

  // Depth branch.
  auto d = depth;
  for (const Stage& s : depth_stem_) d = conv_bn_relu(s.conv, s.norm, d, mode);
  std::vector<std::pair<Tensor<T>, Tensor<T>>> depth_spp;
  for (int i : depth_spp_) depth_spp.emplace_back(convs_[i].weight, convs_[i].bias);
  auto depth_features = spp_forward(d, c.spp_windows, PoolKind::Max, depth_spp);

  // Fusion: 1/2 -> 1/4 -> 1/2.
  auto f = ad::concat_channels<T>({res_tap, rgb_features, depth_features});
  for (const Stage& s : fusion_) f = conv_bn_relu(s.conv, s.norm, f, mode);

  // Decoder: 1/2 -> full, every stage tapped for the head.
  std::vector<Tensor<T>> taps;
  auto g = f;
  for (const Stage& s : decoder_) {
    g = conv_bn_relu(s.conv, s.norm, g, mode);
    taps.push_back(ad::upsample_bilinear(g, in.h, in.w));
  }
  auto logits = apply_conv(head_, ad::concat_channels(taps));
  return rescale_open(ad::sigmoid(logits), static_cast<T>(c.max_depth));
}

template <typename T>
std::size_t DFuseNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
void DFuseNet<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
TensorArchive DFuseNet<T>::to_archive() const {
  TensorArchive a;
  a.metadata = config_.to_json();
  for (const auto& p : params_) {
    a.add("param/" + p.name, p.tensor.shape(),
          std::vector<float>(p.tensor.values().begin(), p.tensor.values().end()));
  }
  for (const auto& n : norms_) {
    const int ch = static_cast<int>(n.stats.mean.size());
    a.add("buffer/" + n.name + ".running_mean", Shape{1, ch, 1, 1},
          std::vector<float>(n.stats.mean.begin(), n.stats.mean.end()));
    a.add("buffer/" + n.name + ".running_var", Shape{1, ch, 1, 1},
          std::vector<float>(n.stats.var.begin(), n.stats.var.end()));
  }
  return a;
}

template <typename T>
void DFuseNet<T>::load_archive(const TensorArchive& archive) {
  auto fetch = [&](const std::string& name, const Shape& shape) {
    const TensorRecord* r = archive.find(name);
    if (!r) {
      throw IncompatibleCheckpoint("checkpoint lacks " + name);
    }
    if (!(r->shape == shape)) {
      throw IncompatibleCheckpoint("parameter " + name + " has shape " +
                                   r->shape.str() + " in the checkpoint but " +
                                   shape.str() + " in the model");
    }
    return r;
  };
  // Validate everything before touching any value.
  for (const auto& p : params_) fetch("param/" + p.name, p.tensor.shape());
  for (const auto& n : norms_) {
    const Shape s{1, static_cast<int>(n.stats.mean.size()), 1, 1};
    fetch("buffer/" + n.name + ".running_mean", s);
    fetch("buffer/" + n.name + ".running_var", s);
  }
  for (auto& p : params_) {
    const auto* r = fetch("param/" + p.name, p.tensor.shape());
    std::copy(r->values.begin(), r->values.end(), p.tensor.mutable_values().begin());
  }
  for (auto& n : norms_) {
    const Shape s{1, static_cast<int>(n.stats.mean.size()), 1, 1};
    const auto* m = fetch("buffer/" + n.name + ".running_mean", s);
    const auto* v = fetch("buffer/" + n.name + ".running_var", s);
    std::copy(m->values.begin(), m->values.end(), n.stats.mean.begin());
    std::copy(v->values.begin(), v->values.end(), n.stats.var.begin());
  }
}

template <typename T>
template <typename U>
void DFuseNet<T>::copy_from(const DFuseNet<U>& other) {
  if (!(other.config() == config_)) {
    throw IncompatibleCheckpoint("cannot copy weights between different configs");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto src = other.params_[i].tensor.values();
    auto dst = params_[i].tensor.mutable_values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(src[k]);
  }
  for (std::size_t i = 0; i < norms_.size(); ++i) {
    const auto& s = other.norms_[i].stats;
    for (std::size_t k = 0; k < s.mean.size(); ++k) {
      norms_[i].stats.mean[k] = static_cast<T>(s.mean[k]);
      norms_[i].stats.var[k] = static_cast<T>(s.var[k]);
    }
  }
}

// ---------------------------------------------------------------------------
// Batching helpers

template <typename T>
Tensor<T> rgb_batch(std::span<const IntensityImage> images) {
  if (images.empty()) throw ShapeError("empty rgb batch");
  const int w = images[0].width();
  const int h = images[0].height();
  const Shape s{static_cast<int>(images.size()), 3, h, w};
  std::vector<T> v(s.numel());
  std::size_t o = 0;
  for (const auto& img : images) {
    if (img.width() != w || img.height() != h) {
      throw ShapeError("rgb batch images differ in size");
    }
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) v[o++] = static_cast<T>(img.at(x, y, c));
  }
  return Tensor<T>::from(s, std::move(v));
}

template <typename T>
Tensor<T> depth_batch(std::span<const NormalizedDepth> depths) {
  if (depths.empty()) throw ShapeError("empty depth batch");
  const int w = depths[0].width;
  const int h = depths[0].height;
  const Shape s{static_cast<int>(depths.size()), 1, h, w};
  std::vector<T> v;
  v.reserve(s.numel());
  for (const auto& d : depths) {
    if (d.width != w || d.height != h) {
      throw ShapeError("depth batch rasters differ in size");
    }
    for (float x : d.values) v.push_back(static_cast<T>(x));
  }
  return Tensor<T>::from(s, std::move(v));
}

template <typename T>
std::vector<DepthMap> to_depth_maps(const Tensor<T>& prediction,
                                    double max_depth) {
  const Shape s = prediction.shape();
  if (s.c != 1) throw ShapeError("prediction must have one channel");
  std::vector<DepthMap> out;
  const float ceiling = std::nextafter(static_cast<float>(max_depth), 0.0f);
  for (int n = 0; n < s.n; ++n) {
    std::vector<float> v(s.plane());
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = std::min(static_cast<float>(prediction.values()[n * s.plane() + i]),
                      ceiling);
    }
    out.emplace_back(s.w, s.h, std::move(v), max_depth);
  }
  return out;
}

template class DFuseNet<float>;
template class DFuseNet<double>;
template void DFuseNet<float>::copy_from<double>(const DFuseNet<double>&);
template void DFuseNet<double>::copy_from<float>(const DFuseNet<float>&);
template void DFuseNet<float>::copy_from<float>(const DFuseNet<float>&);
template void DFuseNet<double>::copy_from<double>(const DFuseNet<double>&);

template Tensor<float> spp_forward<float>(
    const Tensor<float>&, const std::vector<int>&, PoolKind,
    const std::vector<std::pair<Tensor<float>, Tensor<float>>>&);
template Tensor<double> spp_forward<double>(
    const Tensor<double>&, const std::vector<int>&, PoolKind,
    const std::vector<std::pair<Tensor<double>, Tensor<double>>>&);
template Tensor<float> rgb_batch<float>(std::span<const IntensityImage>);
template Tensor<double> rgb_batch<double>(std::span<const IntensityImage>);
template Tensor<float> depth_batch<float>(std::span<const NormalizedDepth>);
template Tensor<double> depth_batch<double>(std::span<const NormalizedDepth>);
template std::vector<DepthMap> to_depth_maps<float>(const Tensor<float>&, double);
template std::vector<DepthMap> to_depth_maps<double>(const Tensor<double>&, double);

}  // namespace dfuse
