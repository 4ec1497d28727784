#include "dfuse/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "dfuse/error.hpp"
#include "dfuse/parallel.hpp"
#include "dfuse/sample.hpp"

namespace dfuse {

using nlohmann::json;

// ---------------------------------------------------------------------------
// ADAM

template <typename T>
void adam_step(std::vector<ad::Parameter<T>>& params, AdamState<T>& state,
               double lr, double weight_decay, const AdamOptions& options) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].tensor.numel(), T(0));
      state.v[i].assign(params[i].tensor.numel(), T(0));
    }
  }
  ++state.t;
  const double b1 = options.beta1;
  const double b2 = options.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].tensor.mutable_values();
    const auto grad = params[i].tensor.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != theta.size() || v.size() != theta.size()) {
      throw ShapeError("optimizer state does not match parameter " +
                       params[i].name);
    }
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double p = theta[k];
      const double g = (grad.empty() ? 0.0 : static_cast<double>(grad[k])) +
                       weight_decay * p;
      const double mk = b1 * m[k] + (1.0 - b1) * g;
      const double vk = b2 * v[k] + (1.0 - b2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      theta[k] = static_cast<T>(
          p - lr * (mk / c1) / (std::sqrt(vk / c2) + options.epsilon));
    }
  }
}

template void adam_step<float>(std::vector<ad::Parameter<float>>&,
                               AdamState<float>&, double, double,
                               const AdamOptions&);
template void adam_step<double>(std::vector<ad::Parameter<double>>&,
                                AdamState<double>&, double, double,
                                const AdamOptions&);

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be positive");
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw ConfigError("weight_decay must be non-negative");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) {
    throw ConfigError("lr_decay_factor must lie in (0, 1]");
  }
  if (lr_decay_every_epochs < 1) {
    throw ConfigError("lr_decay_every_epochs must be >= 1");
  }
  weights.validate();
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 &&
        adam.beta2 < 1.0 && adam.epsilon > 0.0)) {
    throw ConfigError("ADAM needs betas in [0, 1) and a positive epsilon");
  }
  if (crop_height < 0 || crop_width < 0 || (crop_height == 0) != (crop_width == 0)) {
    throw ConfigError("crop size must be both positive or both zero");
  }
  fill.validate();
  sgm.validate();
  if (rig) rig->validate();
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
}

namespace {

const char* shape_name(KernelShape s) {
  switch (s) {
    case KernelShape::Full: return "full";
    case KernelShape::Diamond: return "diamond";
    case KernelShape::Cross: return "cross";
  }
  return "full";
}

KernelShape parse_shape(const std::string& s) {
  if (s == "full") return KernelShape::Full;
  if (s == "diamond") return KernelShape::Diamond;
  if (s == "cross") return KernelShape::Cross;
  throw ConfigError("unknown kernel shape '" + s + "'");
}

}  // namespace

std::string TrainConfig::to_json() const {
  json j;
  j["learning_rate"] = learning_rate;
  j["weight_decay"] = weight_decay;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["lr_decay_factor"] = lr_decay_factor;
  j["lr_decay_every_epochs"] = lr_decay_every_epochs;
  j["seed"] = seed;
  j["weights"] = {{"alpha", weights.alpha}, {"beta", weights.beta},
                  {"gamma", weights.gamma}};
  j["loss"] = {{"primary_l1", loss.primary_norm == PrimaryNorm::L1},
               {"stereo_exclude_gt", loss.stereo_exclude_gt}};
  j["adam"] = {{"beta1", adam.beta1}, {"beta2", adam.beta2},
               {"epsilon", adam.epsilon}};
  j["crop_height"] = crop_height;
  j["crop_width"] = crop_width;
  j["fill"] = {{"initial_size", fill.initial.size},
               {"initial_shape", shape_name(fill.initial.shape)},
               {"closing_size", fill.closing_size},
               {"hole_size", fill.hole_size},
               {"hole_iterations", fill.hole_iterations},
               {"blur_size", fill.blur_size},
               {"blur_sigma", fill.blur_sigma}};
  j["sgm"] = {{"census_window", sgm.census_window}, {"dmax", sgm.dmax},
              {"p1", sgm.p1}, {"p2", sgm.p2},
              {"lr_tolerance", sgm.lr_tolerance}};
  if (rig) {
    j["rig"] = {{"fx", rig->intrinsics.fx}, {"fy", rig->intrinsics.fy},
                {"cx", rig->intrinsics.cx}, {"cy", rig->intrinsics.cy},
                {"baseline_m", rig->baseline_m}};
  } else {
    j["rig"] = nullptr;
  }
  j["cache_dir"] = cache_dir.string();
  j["checkpoint_dir"] = checkpoint_dir.string();
  j["jobs"] = jobs;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig c;
  try {
    const json j = json::parse(text);
    c.learning_rate = j.at("learning_rate");
    c.weight_decay = j.at("weight_decay");
    c.batch_size = j.at("batch_size");
    c.epochs = j.at("epochs");
    c.lr_decay_factor = j.at("lr_decay_factor");
    c.lr_decay_every_epochs = j.at("lr_decay_every_epochs");
    c.seed = j.at("seed");
    c.weights = {j.at("weights").at("alpha"), j.at("weights").at("beta"),
                 j.at("weights").at("gamma")};
    c.loss.primary_norm = j.at("loss").at("primary_l1").get<bool>()
                              ? PrimaryNorm::L1
                              : PrimaryNorm::L2;
    c.loss.stereo_exclude_gt = j.at("loss").at("stereo_exclude_gt");
    c.adam = {j.at("adam").at("beta1"), j.at("adam").at("beta2"),
              j.at("adam").at("epsilon")};
    c.crop_height = j.at("crop_height");
    c.crop_width = j.at("crop_width");
    const auto& f = j.at("fill");
    c.fill.initial = {f.at("initial_size"),
                      parse_shape(f.at("initial_shape").get<std::string>())};
    c.fill.closing_size = f.at("closing_size");
    c.fill.hole_size = f.at("hole_size");
    c.fill.hole_iterations = f.at("hole_iterations");
    c.fill.blur_size = f.at("blur_size");
    c.fill.blur_sigma = f.at("blur_sigma");
    const auto& s = j.at("sgm");
    c.sgm.census_window = s.at("census_window");
    c.sgm.dmax = s.at("dmax");
    c.sgm.p1 = s.at("p1");
    c.sgm.p2 = s.at("p2");
    c.sgm.lr_tolerance = s.at("lr_tolerance");
    if (!j.at("rig").is_null()) {
      const auto& r = j.at("rig");
      StereoRig rig;
      rig.intrinsics = {r.at("fx"), r.at("fy"), r.at("cx"), r.at("cy")};
      rig.baseline_m = r.at("baseline_m");
      c.rig = rig;
    }
    c.cache_dir = j.at("cache_dir").get<std::string>();
    c.checkpoint_dir = j.at("checkpoint_dir").get<std::string>();
    c.jobs = j.at("jobs");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad training config: ") + e.what());
  }
  c.validate();
  return c;
}

double schedule_lr(int epoch, const TrainConfig& config) {
  if (epoch < 0) throw InvalidInput("epoch must be >= 0");
  const int drops = epoch / config.lr_decay_every_epochs;
  return config.learning_rate * std::pow(config.lr_decay_factor, drops);
}

std::string StepLog::line() const {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "step=%lld epoch=%d lr=%.9g primary=%.9g stereo=%.9g "
                "smooth=%.9g total=%.9g stereo_empty=%d",
                static_cast<long long>(step), epoch, lr, primary, stereo,
                smooth, total, stereo_empty ? 1 : 0);
  return buf;
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Data

std::vector<TrainingSample> load_samples(const DatasetManifest& manifest,
                                         bool with_right, std::ostream* warn) {
  std::vector<TrainingSample> out;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    try {
      if (!r.gt_depth_path) throw InvalidInput("record has no ground truth");
      TrainingSample s;
      s.rgb = read_rgb8(r.rgb_path);
      s.sparse = read_depth_png16(r.sparse_depth_path)
                     .rebound(manifest.max_depth, true);
      s.gt = read_depth_png16(*r.gt_depth_path).rebound(manifest.max_depth, true);
      if (with_right && r.right_rgb_path) s.right = read_rgb8(*r.right_rgb_path);
      out.push_back(std::move(s));
    } catch (const Error& e) {
      if (warn) {
        *warn << "warning: skipping record " << i << " (" << r.rgb_path.string()
              << "): " << e.what() << "\n";
      }
    }
  }
  return out;
}

namespace {

IntensityImage crop_rgb(const IntensityImage& img, int x0, int y0, int w, int h) {
  std::vector<float> v;
  v.reserve(static_cast<std::size_t>(w) * h * 3);
  for (int y = y0; y < y0 + h; ++y) {
    const auto row = img.values().subspan(
        (static_cast<std::size_t>(y) * img.width() + x0) * 3,
        static_cast<std::size_t>(w) * 3);
    v.insert(v.end(), row.begin(), row.end());
  }
  return IntensityImage(w, h, std::move(v));
}

template <typename V>
std::vector<V> crop_plane(std::span<const V> src, int width, int x0, int y0,
                          int w, int h) {
  std::vector<V> v;
  v.reserve(static_cast<std::size_t>(w) * h);
  for (int y = y0; y < y0 + h; ++y) {
    const auto row =
        src.subspan(static_cast<std::size_t>(y) * width + x0, static_cast<std::size_t>(w));
    v.insert(v.end(), row.begin(), row.end());
  }
  return v;
}

DepthMap crop_depth(const DepthMap& m, int x0, int y0, int w, int h) {
  return DepthMap(w, h, crop_plane(m.values(), m.width(), x0, y0, w, h),
                  m.max_depth());
}

NormalizedDepth crop_norm(const NormalizedDepth& n, int x0, int y0, int w, int h) {
  return {w, h,
          crop_plane(std::span<const float>(n.values), n.width, x0, y0, w, h)};
}

ValidMask crop_mask(const ValidMask& m, int x0, int y0, int w, int h) {
  ValidMask out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.set(x, y, m.at(x + x0, y + y0));
  return out;
}

std::uint64_t sgm_key(const IntensityImage& left, const IntensityImage& right,
                      const SgmParams& p, const StereoRig& rig,
                      double max_depth) {
  std::uint64_t h = fnv1a(left.values().data(), left.values().size_bytes());
  h = fnv1a(right.values().data(), right.values().size_bytes(), h);
  const int dims[] = {left.width(), left.height(), p.census_window, p.dmax};
  h = fnv1a(dims, sizeof dims, h);
  const std::uint32_t pen[] = {p.p1, p.p2};
  h = fnv1a(pen, sizeof pen, h);
  const double reals[] = {p.lr_tolerance,    rig.intrinsics.fx, rig.intrinsics.fy,
                          rig.intrinsics.cx, rig.intrinsics.cy, rig.baseline_m,
                          max_depth};
  return fnv1a(reals, sizeof reals, h);
}

struct Prepared {
  PreparedSample sample;
  bool sgm_ran = false;
};

Prepared prepare_one(const TrainingSample& s, const TrainConfig& config,
                     double max_depth, bool want_stereo) {
  const int w = s.rgb.width();
  const int h = s.rgb.height();
  if (s.sparse.width() != w || s.sparse.height() != h || s.gt.width() != w ||
      s.gt.height() != h) {
    throw ShapeError("rgb, sparse and ground-truth rasters differ in size");
  }
  if (config.crop_width > w || config.crop_height > h) {
    throw InvalidInput("image " + std::to_string(w) + "x" + std::to_string(h) +
                       " is smaller than the training crop");
  }
  Prepared out;
  out.sample.rgb = s.rgb;
  out.sample.gt = s.gt.rebound(max_depth, true);
  const DepthMap filled =
      morph_fill(s.sparse.rebound(max_depth, true), config.fill);
  out.sample.input = normalize_depth(filled);

  if (want_stereo && s.right && config.rig) {
    const StereoRig& rig = *config.rig;
    std::filesystem::path file;
    if (!config.cache_dir.empty()) {
      char name[40];
      std::snprintf(name, sizeof name, "sgm_%016llx.arc",
                    static_cast<unsigned long long>(
                        sgm_key(s.rgb, *s.right, config.sgm, rig, max_depth)));
      file = config.cache_dir / name;
    }
    if (!file.empty() && std::filesystem::exists(file)) {
      const TensorArchive a = load_archive(file);
      const auto* d = a.find("depth");
      const auto* m = a.find("mask");
      if (!d || !m || d->values.size() != static_cast<std::size_t>(w) * h ||
          m->values.size() != d->values.size()) {
        throw FormatError("corrupt SGM cache entry " + file.string());
      }
      out.sample.stereo_depth = DepthMap(w, h, d->values, max_depth);
      ValidMask mask(w, h);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          mask.set(x, y, m->values[static_cast<std::size_t>(y) * w + x] != 0.0f);
      out.sample.stereo_mask = std::move(mask);
    } else {
      StereoEstimate est =
          sgm_stereo_depth(s.rgb, *s.right, rig, config.sgm, max_depth);
      out.sgm_ran = true;
      if (!file.empty()) {
        TensorArchive a;
        a.add("depth", {1, 1, h, w},
              std::vector<float>(est.depth.values().begin(),
                                 est.depth.values().end()));
        a.add("mask", {1, 1, h, w},
              std::vector<float>(est.mask.flags().begin(), est.mask.flags().end()));
        std::filesystem::create_directories(config.cache_dir);
        save_archive(a, file);
      }
      out.sample.stereo_depth = std::move(est.depth);
      out.sample.stereo_mask = std::move(est.mask);
    }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(DFuseNetConfig model_config, TrainConfig config,
                 std::ostream* log)
    : model_config_(std::move(model_config)),
      config_(std::move(config)),
      log_(log),
      model_(model_config_, config_.seed) {
  config_.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(config_.seed),
                    static_cast<std::uint32_t>(config_.seed >> 32), 0x5eedu};
  rng_.seed(seq);
}

void Trainer::set_data(const std::vector<TrainingSample>& train,
                       const std::vector<TrainingSample>& holdout) {
  const double max_depth = model_config_.max_depth;
  const bool want_stereo = config_.weights.beta > 0.0;

  auto run = [&](const std::vector<TrainingSample>& in, bool stereo,
                 const char* split) {
    std::vector<std::optional<Prepared>> slots(in.size());
    std::vector<std::string> errors(in.size());
    parallel_for(in.size(), config_.jobs, [&](std::size_t i) {
      try {
        slots[i] = prepare_one(in[i], config_, max_depth, stereo);
      } catch (const Error& e) {
        errors[i] = e.what();
      }
    });
    std::vector<PreparedSample> out;
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (!slots[i]) {
        if (log_) {
          *log_ << "warning: skipping " << split << " sample " << i << ": "
                << errors[i] << "\n";
        }
        continue;
      }
      if (slots[i]->sgm_ran) {
        ++sgm_invocations_;
        if (log_) *log_ << "sgm " << split << " sample=" << i << "\n";
      }
      out.push_back(std::move(slots[i]->sample));
    }
    return out;
  };
  train_ = run(train, want_stereo, "train");
  holdout_ = run(holdout, false, "holdout");
}

void Trainer::set_data(const DatasetManifest& train,
                       const DatasetManifest* holdout) {
  const bool with_right = config_.weights.beta > 0.0 && config_.rig.has_value();
  auto t = load_samples(train, with_right, log_);
  std::vector<TrainingSample> h;
  if (holdout) h = load_samples(*holdout, false, log_);
  set_data(t, h);
}

StepLog Trainer::train_step(const std::vector<std::size_t>& batch, double lr) {
  std::vector<IntensityImage> rgb;
  std::vector<NormalizedDepth> input;
  std::vector<DepthMap> gt;
  std::vector<DepthMap> stereo;
  std::vector<ValidMask> stereo_mask;
  bool any_stereo = false;
  for (std::size_t idx : batch) {
    const PreparedSample& s = train_[idx];
    int x0 = 0, y0 = 0;
    int w = s.rgb.width(), h = s.rgb.height();
    if (config_.crop_width > 0) {
      y0 = static_cast<int>(uniform_index(rng_, h - config_.crop_height + 1));
      x0 = static_cast<int>(uniform_index(rng_, w - config_.crop_width + 1));
      w = config_.crop_width;
      h = config_.crop_height;
    }
    rgb.push_back(crop_rgb(s.rgb, x0, y0, w, h));
    input.push_back(crop_norm(s.input, x0, y0, w, h));
    gt.push_back(crop_depth(s.gt, x0, y0, w, h));
    if (s.stereo_depth) {
      any_stereo = true;
      stereo.push_back(crop_depth(*s.stereo_depth, x0, y0, w, h));
      stereo_mask.push_back(crop_mask(*s.stereo_mask, x0, y0, w, h));
    } else {
      stereo.emplace_back(w, h, model_config_.max_depth);
      stereo_mask.emplace_back(w, h, false);
    }
  }
  if (!std::all_of(gt.begin(), gt.end(), [&](const DepthMap& m) {
        return m.width() == gt[0].width() && m.height() == gt[0].height();
      })) {
    throw ShapeError("batch images differ in size; set a training crop");
  }

  const auto x_rgb = rgb_batch<float>(rgb);
  const auto x_depth = depth_batch<float>(input);
  const MaskedTarget gt_target = MaskedTarget::from_maps(gt);
  std::optional<MaskedTarget> st_target;
  if (any_stereo) st_target = MaskedTarget::from_masked(stereo, stereo_mask);

  auto pred = model_.forward(x_rgb, x_depth, ad::Mode::Train);
  auto losses = total_loss(pred, gt_target, st_target ? &*st_target : nullptr,
                           config_.weights, config_.loss);
  model_.zero_grad();
  ad::backward(losses.total);
  adam_step(model_.parameters(), adam_, lr, config_.weight_decay, config_.adam);
  ++step_;

  StepLog log;
  log.step = step_;
  log.epoch = epoch_ + 1;
  log.lr = lr;
  log.primary = losses.primary.item();
  log.stereo = losses.stereo.item();
  log.smooth = losses.smooth.item();
  log.total = losses.total.item();
  log.stereo_empty = losses.stereo_empty;
  return log;
}

std::vector<StepLog> Trainer::run_epoch() {
  if (train_.empty()) throw Error("empty epoch: no usable training samples");
  std::vector<std::size_t> order(train_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[uniform_index(rng_, i)]);
  }
  const double lr = schedule_lr(epoch_, config_);
  std::vector<StepLog> logs;
  const std::size_t bs = static_cast<std::size_t>(config_.batch_size);
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::vector<std::size_t> batch(
        order.begin() + start, order.begin() + std::min(order.size(), start + bs));
    bool has_gt = false;
    for (std::size_t i : batch) has_gt |= train_[i].gt.valid_count() > 0;
    if (!has_gt) {
      if (log_) *log_ << "warning: batch without ground truth skipped\n";
      continue;
    }
    logs.push_back(train_step(batch, lr));
    if (log_) *log_ << logs.back().line() << "\n";
  }
  ++epoch_;
  return logs;
}

std::optional<MetricsReport> Trainer::evaluate() {
  std::vector<MetricsReport> reports;
  for (const auto& s : holdout_) {
    if (s.gt.valid_count() == 0) continue;
    const auto x_rgb = rgb_batch<float>(std::span(&s.rgb, 1));
    const auto x_depth = depth_batch<float>(std::span(&s.input, 1));
    const auto pred = model_.forward(x_rgb, x_depth, ad::Mode::Eval);
    const auto maps = to_depth_maps(pred, model_config_.max_depth);
    reports.push_back(compute_metrics(maps[0], s.gt));
  }
  if (reports.empty()) return std::nullopt;
  return aggregate_metrics(reports);
}

void Trainer::train() {
  while (epoch_ < config_.epochs) {
    run_epoch();
    if (!config_.checkpoint_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04d.ckpt", epoch_);
      std::filesystem::create_directories(config_.checkpoint_dir);
      save_checkpoint(config_.checkpoint_dir / name);
    }
    if (auto report = evaluate(); report && log_) {
      std::string kv = report->to_key_values();
      std::replace(kv.begin(), kv.end(), '\n', ' ');
      if (!kv.empty()) kv.pop_back();
      *log_ << "eval epoch=" << epoch_ << " " << kv << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

TensorArchive Trainer::checkpoint() const {
  TensorArchive a = model_.to_archive();
  const auto& params = model_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    std::vector<float> m(p.tensor.numel(), 0.0f);
    std::vector<float> v(p.tensor.numel(), 0.0f);
    if (i < adam_.m.size()) {
      m = adam_.m[i];
      v = adam_.v[i];
    }
    a.add("adam/m/" + p.name, p.tensor.shape(), std::move(m));
    a.add("adam/v/" + p.name, p.tensor.shape(), std::move(v));
  }
  std::ostringstream rng;
  rng << rng_;
  json meta;
  meta["kind"] = "trainer";
  meta["model"] = json::parse(model_config_.to_json());
  meta["train"] = json::parse(config_.to_json());
  meta["epoch"] = epoch_;
  meta["step"] = step_;
  meta["adam_t"] = adam_.t;
  meta["rng"] = rng.str();
  a.metadata = meta.dump();
  return a;
}

void Trainer::restore(const TensorArchive& archive) {
  json meta;
  try {
    meta = json::parse(archive.metadata);
  } catch (const json::exception&) {
    throw IncompatibleCheckpoint("checkpoint metadata is not JSON");
  }
  if (!meta.is_object() || meta.value("kind", "") != "trainer") {
    throw IncompatibleCheckpoint("not a trainer checkpoint");
  }
  model_.load_archive(archive);
  const DFuseNetConfig saved = DFuseNetConfig::from_json(meta.at("model").dump());
  if (!(saved == model_config_)) {
    throw IncompatibleCheckpoint("checkpoint was written for a different model config");
  }
  const auto& params = model_.parameters();
  AdamState<float> adam;
  for (const auto& p : params) {
    const auto* m = archive.find("adam/m/" + p.name);
    const auto* v = archive.find("adam/v/" + p.name);
    if (!m || !v || m->values.size() != p.tensor.numel() ||
        v->values.size() != p.tensor.numel()) {
      throw IncompatibleCheckpoint("optimizer state missing or mismatched for " +
                                   p.name);
    }
    adam.m.push_back(m->values);
    adam.v.push_back(v->values);
  }
  try {
    adam.t = meta.at("adam_t");
    epoch_ = meta.at("epoch");
    step_ = meta.at("step");
    std::istringstream rng(meta.at("rng").get<std::string>());
    rng >> rng_;
    if (!rng) throw IncompatibleCheckpoint("bad RNG state in checkpoint");
  } catch (const json::exception& e) {
    throw IncompatibleCheckpoint(std::string("bad checkpoint metadata: ") + e.what());
  }
  adam_ = std::move(adam);
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  save_archive(checkpoint(), path);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  restore(load_archive(path));
}

Trainer train_loop(const DFuseNetConfig& model_config,
                   const DatasetManifest& train, const TrainConfig& config,
                   const DatasetManifest* holdout, std::ostream* log) {
  Trainer t(model_config, config, log);
  t.set_data(train, holdout);
  t.train();
  return t;
}

DFuseNet<float> load_model(const std::filesystem::path& path) {
  const TensorArchive a = load_archive(path);
  std::string config_text = a.metadata;
  try {
    const json meta = json::parse(a.metadata);
    if (meta.is_object() && meta.contains("model")) config_text = meta["model"].dump();
  } catch (const json::exception&) {
    throw IncompatibleCheckpoint("checkpoint metadata is not JSON");
  }
  DFuseNet<float> model(DFuseNetConfig::from_json(config_text), 0);
  model.load_archive(a);
  return model;
}

DepthMap predict_depth(DFuseNet<float>& model, const IntensityImage& rgb,
                       const DepthMap& sparse, const FillParams& fill) {
  if (rgb.width() != sparse.width() || rgb.height() != sparse.height()) {
    throw ShapeError("rgb and sparse depth differ in size");
  }
  const double max_depth = model.config().max_depth;
  const NormalizedDepth input =
      normalize_depth(morph_fill(sparse.rebound(max_depth, true), fill));
  const auto pred = model.forward(rgb_batch<float>(std::span(&rgb, 1)),
                                  depth_batch<float>(std::span(&input, 1)),
                                  ad::Mode::Eval);
  return to_depth_maps(pred, max_depth)[0];
}

}  // namespace dfuse
