#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "doctest.h"
#include "dfuse/error.hpp"
#include "dfuse/sample.hpp"
#include "dfuse/train.hpp"
#include "support/synthetic.hpp"

using namespace dfuse;
namespace fs = std::filesystem;
using ad::Shape;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("dfuse_train_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<TrainingSample> samples(int count, bool with_right = false) {
  std::vector<TrainingSample> out;
  for (int i = 0; i < count; ++i) {
    const auto scene = testing::make_scene(200 + i, 128, 64);
    TrainingSample s{scene.rgb, sparsify(scene.depth, SampleSpec::count(600), i), scene.depth,
                     std::nullopt};
    if (with_right) s.right = testing::shifted_pair(128, 64, 3, 300 + i).second;
    out.push_back(std::move(s));
  }
  return out;
}

TrainConfig small_config() {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.crop_height = 32;
  c.crop_width = 64;
  c.batch_size = 2;
  c.seed = 42;
  c.weights.beta = 0.0;
  return c;
}

StereoRig test_rig() {
  StereoRig r;
  r.intrinsics = {100.0, 100.0, 64.0, 32.0};
  r.baseline_m = 0.5;
  return r;
}

std::vector<std::string> step_lines(const std::vector<StepLog>& logs) {
  std::vector<std::string> out;
  for (const auto& l : logs) out.push_back(l.line());
  return out;
}

}  // namespace

TEST_CASE("adam first step and zero gradient") {
  using TD = ad::Tensor<double>;
  std::vector<ad::Parameter<double>> params{{"a", TD::from({1, 1, 1, 3}, {1.0, -2.0, 0.5}, true)}};
  AdamState<double> st;
  for (double& g : params[0].tensor.mutable_grad()) g = 0.7;
  adam_step(params, st, 0.01, 0.0);
  const double expect[3] = {0.99, -2.01, 0.49};
  for (int i = 0; i < 3; ++i) CHECK(params[0].tensor.values()[i] == doctest::Approx(expect[i]).epsilon(1e-9));
  CHECK(st.t == 1);

  std::vector<ad::Parameter<double>> still{{"b", TD::from({1, 1, 1, 2}, {3.0, 4.0}, true)}};
  AdamState<double> s2;
  for (int k = 0; k < 3; ++k) adam_step(still, s2, 0.1, 0.0);
  CHECK(still[0].tensor.values()[0] == 3.0);
  CHECK(still[0].tensor.values()[1] == 4.0);
}

TEST_CASE("adam matches a scalar reference over three steps") {
  using TD = ad::Tensor<double>;
  std::vector<ad::Parameter<double>> params{{"x", TD::from({1, 1, 1, 1}, {0.3}, true)}};
  AdamState<double> st;
  double x = 0.3, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    params[0].tensor.mutable_grad()[0] = 1.0;
    adam_step(params, st, 0.1, 0.0);
    m = 0.9 * m + 0.1 * 1.0;
    v = 0.999 * v + 0.001 * 1.0;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    x -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    CHECK(std::abs(params[0].tensor.values()[0] - x) <= 1e-12);
  }
}

TEST_CASE("weight decay alone shrinks parameters every step") {
  using TD = ad::Tensor<double>;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> init(20);
  for (auto& v : init) v = n(rng);
  std::vector<ad::Parameter<double>> params{{"w", TD::from({1, 1, 4, 5}, init, true)}};
  AdamState<double> st;
  auto norm = [&] {
    double s = 0;
    for (double v : params[0].tensor.values()) s += v * v;
    return s;
  };
  double prev = norm();
  for (int k = 0; k < 20; ++k) {
    params[0].tensor.zero_grad();
    adam_step(params, st, 1e-2, 1e-2);
    const double now = norm();
    CHECK(now < prev);
    prev = now;
  }
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  CHECK(schedule_lr(0, c) == 1e-4);
  CHECK(schedule_lr(4, c) == 1e-4);
  CHECK(schedule_lr(5, c) == doctest::Approx(9e-5).epsilon(1e-12));
  CHECK(schedule_lr(10, c) == doctest::Approx(8.1e-5).epsilon(1e-12));
  double prev = schedule_lr(0, c);
  for (int e = 1; e < 60; ++e) {
    CHECK(schedule_lr(e, c) <= prev);
    prev = schedule_lr(e, c);
  }
  CHECK_THROWS_AS(schedule_lr(-1, c), InvalidInput);
}

TEST_CASE("training config validation and serialization") {
  TrainConfig c = small_config();
  c.rig = test_rig();
  c.cache_dir = "/tmp/x";
  CHECK(TrainConfig::from_json(c.to_json()) == c);
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.lr_decay_factor = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json("{\"learning_rate\": 1}"), ConfigError);
}

TEST_CASE("step log line") {
  StepLog l{7, 1, 1e-4, 2.5, 0.0, 0.125, 2.500125, true};
  CHECK(l.line() == "step=7 epoch=1 lr=0.0001 primary=2.5 stereo=0 smooth=0.125 total=2.500125 stereo_empty=1");
}

TEST_CASE("training is deterministic and checkpoints round trip") {
  TempDir tmp;
  const auto data = samples(3);
  Trainer a(DFuseNetConfig::tiny(), small_config()), b(DFuseNetConfig::tiny(), small_config());
  a.set_data(data);
  b.set_data(data);
  const auto la = a.run_epoch();
  const auto lb = b.run_epoch();
  CHECK(la.size() == 2);  // 3 samples, batch 2
  CHECK(step_lines(la) == step_lines(lb));
  CHECK(a.epoch() == 1);
  a.save_checkpoint(tmp.path / "a.ckpt");
  b.save_checkpoint(tmp.path / "b.ckpt");
  CHECK(slurp(tmp.path / "a.ckpt") == slurp(tmp.path / "b.ckpt"));

  SUBCASE("save, load, save is byte-identical") {
    Trainer c(DFuseNetConfig::tiny(), small_config());
    c.load_checkpoint(tmp.path / "a.ckpt");
    c.save_checkpoint(tmp.path / "c.ckpt");
    CHECK(slurp(tmp.path / "c.ckpt") == slurp(tmp.path / "a.ckpt"));
    CHECK(c.epoch() == 1);
    CHECK(c.step() == 2);
  }
  SUBCASE("resumed run matches the uninterrupted one step for step") {
    Trainer resumed(DFuseNetConfig::tiny(), small_config());
    resumed.set_data(data);
    resumed.load_checkpoint(tmp.path / "a.ckpt");
    const auto cont = step_lines(a.run_epoch());
    const auto res = step_lines(resumed.run_epoch());
    CHECK(cont == res);
    CHECK(a.checkpoint().tensors == resumed.checkpoint().tensors);
    CHECK(a.checkpoint().metadata == resumed.checkpoint().metadata);
  }
  SUBCASE("a different seed diverges") {
    TrainConfig other = small_config();
    other.seed = 43;
    Trainer d(DFuseNetConfig::tiny(), other);
    d.set_data(data);
    CHECK(step_lines(d.run_epoch()) != step_lines(la));
  }
  SUBCASE("incompatible checkpoints name the offending parameter") {
    DFuseNetConfig wide = DFuseNetConfig::tiny();
    wide.decoder_channels = {16, 8, 4};
    Trainer e(wide, small_config());
    CHECK_THROWS_WITH_AS(e.load_checkpoint(tmp.path / "a.ckpt"),
                         doctest::Contains("decoder.conv3.weight"), IncompatibleCheckpoint);
    Trainer f(DFuseNetConfig::tiny(), small_config());
    CHECK_THROWS_AS(f.restore(a.model().to_archive()), IncompatibleCheckpoint);
  }
}

TEST_CASE("train writes per-epoch checkpoints and evaluates the holdout") {
  TempDir tmp;
  TrainConfig c = small_config();
  c.epochs = 2;
  c.checkpoint_dir = tmp.path;
  std::ostringstream log;
  Trainer t(DFuseNetConfig::tiny(), c, &log);
  const auto data = samples(3);
  t.set_data({data[0], data[1]}, {data[2]});
  t.train();
  CHECK(fs::exists(tmp.path / "epoch_0001.ckpt"));
  CHECK(fs::exists(tmp.path / "epoch_0002.ckpt"));
  CHECK(log.str().find("eval epoch=2 ") != std::string::npos);
  CHECK(log.str().find("step=2 epoch=2") != std::string::npos);
  const auto report = t.evaluate();
  REQUIRE(report);
  CHECK(report->n_valid == 128u * 64u);

  const DFuseNet<float> m = load_model(tmp.path / "epoch_0002.ckpt");
  CHECK(m.parameter_count() == t.model().parameter_count());
}

TEST_CASE("stereo supervision gating") {
  const auto data = samples(2, true);
  SUBCASE("beta = 0 never runs SGM") {
    TrainConfig c = small_config();
    c.rig = test_rig();
    std::ostringstream log;
    Trainer t(DFuseNetConfig::tiny(), c, &log);
    t.set_data(data);
    t.run_epoch();
    CHECK(t.sgm_invocations() == 0);
    CHECK(log.str().find("sgm") == std::string::npos);
    CHECK_FALSE(t.train_samples()[0].stereo_depth);
  }
  SUBCASE("beta > 0 computes each target once and caches it") {
    TempDir tmp;
    TrainConfig c = small_config();
    c.weights.beta = 0.01;
    c.rig = test_rig();
    c.sgm.dmax = 16;
    c.cache_dir = tmp.path;
    std::ostringstream log;
    Trainer t(DFuseNetConfig::tiny(), c, &log);
    t.set_data(data);
    CHECK(t.sgm_invocations() == 2);
    CHECK(log.str().find("sgm train sample=1") != std::string::npos);
    const auto logs = t.run_epoch();
    CHECK_FALSE(logs[0].stereo_empty);
    std::size_t cached = 0;
    for (const auto& e : fs::directory_iterator(tmp.path)) cached += e.path().extension() == ".arc";
    CHECK(cached == 2);

    Trainer again(DFuseNetConfig::tiny(), c);
    again.set_data(data);
    CHECK(again.sgm_invocations() == 0);
    CHECK(again.train_samples()[1].stereo_depth == t.train_samples()[1].stereo_depth);
    CHECK(again.train_samples()[1].stereo_mask == t.train_samples()[1].stereo_mask);
  }
  SUBCASE("no rig means no stereo term") {
    TrainConfig c = small_config();
    c.weights.beta = 0.01;
    Trainer t(DFuseNetConfig::tiny(), c);
    t.set_data(data);
    CHECK(t.sgm_invocations() == 0);
    CHECK(t.run_epoch()[0].stereo_empty);
  }
}

TEST_CASE("unusable data") {
  std::ostringstream log;
  Trainer t(DFuseNetConfig::tiny(), small_config(), &log);
  CHECK_THROWS_WITH_AS(t.run_epoch(), doctest::Contains("empty epoch"), Error);

  // Smaller than the crop: skipped with a warning.
  const auto scene = testing::make_scene(1, 48, 24);
  t.set_data({TrainingSample{scene.rgb, scene.depth, scene.depth, std::nullopt}});
  CHECK(t.train_samples().empty());
  CHECK(log.str().find("warning: skipping train sample 0") != std::string::npos);
  CHECK_THROWS_AS(t.run_epoch(), Error);
}

TEST_CASE("manifest loading skips unreadable records") {
  TempDir tmp;
  const auto scene = testing::make_scene(5, 64, 32);
  write_rgb8(scene.rgb, tmp.path / "a.png");
  write_depth_png16(scene.depth, tmp.path / "a_gt.png");
  std::ofstream(tmp.path / "bad.png") << "garbage";
  std::ofstream(tmp.path / "list.txt") << "max_depth=85\n"
                                       << "a.png\ta_gt.png\ta_gt.png\n"
                                       << "bad.png\ta_gt.png\ta_gt.png\n";
  std::ostringstream warn;
  const auto loaded = load_samples(load_manifest(tmp.path / "list.txt"), false, &warn);
  CHECK(loaded.size() == 1);
  CHECK(warn.str().find("warning: skipping record 1") != std::string::npos);
}

TEST_CASE("prediction keeps the input size") {
  DFuseNet<float> net(DFuseNetConfig::tiny(), 0);
  const auto scene = testing::make_scene(9, 100, 40);
  const DepthMap sparse = sparsify(scene.depth, SampleSpec::fraction(0.05), 2);
  const DepthMap out = predict_depth(net, scene.rgb, sparse);
  CHECK(out.width() == 100);
  CHECK(out.height() == 40);
  CHECK(out.valid_count() == out.size());
}

TEST_CASE("fnv1a reference values") {
  CHECK(fnv1a("", 0) == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a", 1) == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a("foobar", 6) == 0x85944171f73967e8ULL);
}
