#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "dfuse/archive.hpp"
#include "dfuse/imageio.hpp"
#include "dfuse/network.hpp"
#include "dfuse/sample.hpp"
#include "support/synthetic.hpp"

using namespace dfuse;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("dfuse_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(const TempDir& tmp, const std::string& args) {
  const fs::path out = tmp.path / "stdout.txt", err = tmp.path / "stderr.txt";
  const std::string cmd = std::string("\"") + DFUSE_CLI_PATH + "\" " + args + " >\"" +
                          out.string() + "\" 2>\"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

}  // namespace

TEST_CASE("fill") {
  TempDir tmp;
  const auto scene = testing::make_scene(1, 96, 32);
  write_depth_png16(sparsify(scene.depth, SampleSpec::fraction(0.05), 1), tmp.path / "s.png");
  Run r = run(tmp, "fill --input " + q(tmp.path / "s.png") + " --output " + q(tmp.path / "d.png"));
  REQUIRE(r.code == 0);
  const DepthMap dense = read_depth_png16(tmp.path / "d.png");
  CHECK(dense.valid_count() == dense.size());

  SUBCASE("dense input comes back byte-identical") {
    r = run(tmp, "fill --input " + q(tmp.path / "d.png") + " --output " + q(tmp.path / "d2.png"));
    REQUIRE(r.code == 0);
    CHECK(slurp(tmp.path / "d.png") == slurp(tmp.path / "d2.png"));
  }
  SUBCASE("all-zero input is unfillable") {
    write_depth_png16(DepthMap(8, 8), tmp.path / "z.png");
    r = run(tmp, "fill --input " + q(tmp.path / "z.png") + " --output " + q(tmp.path / "o.png"));
    CHECK(r.code == 2);
    CHECK(r.err.find("unfillable") != std::string::npos);
  }
  SUBCASE("bad kernel size is a usage error") {
    r = run(tmp, "fill --input " + q(tmp.path / "s.png") + " --output " + q(tmp.path / "o.png") +
                     " --hole-kernel-px 4");
    CHECK(r.code == 1);
  }
  SUBCASE("config file values, overridden by flags") {
    std::ofstream(tmp.path / "c.ini") << "[fill]\nhole-kernel-px=4\n";
    r = run(tmp, "--config " + q(tmp.path / "c.ini") + " fill --input " + q(tmp.path / "s.png") +
                     " --output " + q(tmp.path / "o.png"));
    CHECK(r.code == 1);  // the file's even kernel is rejected
    r = run(tmp, "--config " + q(tmp.path / "c.ini") + " fill --input " + q(tmp.path / "s.png") +
                     " --output " + q(tmp.path / "o.png") + " --hole-kernel-px 9");
    CHECK(r.code == 0);
    CHECK(slurp(tmp.path / "o.png") == slurp(tmp.path / "d.png"));
  }
}

TEST_CASE("sgm") {
  TempDir tmp;
  const int k = 4;
  const auto [l, rr] = testing::shifted_pair(96, 40, k, 3);
  write_rgb8(l, tmp.path / "l.png");
  write_rgb8(rr, tmp.path / "r.png");
  const std::string common = " --fx-px 100 --baseline-m 0.5 --max-disparity-px 16 --out-depth " +
                             q(tmp.path / "d.png") + " --out-mask " + q(tmp.path / "m.png");
  Run r = run(tmp, "sgm --left " + q(tmp.path / "l.png") + " --right " + q(tmp.path / "r.png") + common);
  REQUIRE(r.code == 0);
  const DepthMap d = read_depth_png16(tmp.path / "d.png");
  const ValidMask m = read_mask_png8(tmp.path / "m.png");
  int good = 0, total = 0;
  for (int y = 2; y < 38; ++y)
    for (int x = 16; x < 94; ++x) {
      ++total;
      good += m.at(x, y) && d.at(x, y) == 12.5f;  // 100 * 0.5 / 4
    }
  CHECK(good >= 0.95 * total);

  SUBCASE("identical pair gives no depth") {
    r = run(tmp, "sgm --left " + q(tmp.path / "l.png") + " --right " + q(tmp.path / "l.png") + common);
    REQUIRE(r.code == 0);
    CHECK(read_depth_png16(tmp.path / "d.png").valid_count() == 0);
  }
  SUBCASE("missing --right is a usage error") {
    r = run(tmp, "sgm --left " + q(tmp.path / "l.png") + common);
    CHECK(r.code == 1);
  }
  SUBCASE("dimension mismatch") {
    write_rgb8(IntensityImage(50, 40), tmp.path / "small.png");
    r = run(tmp, "sgm --left " + q(tmp.path / "l.png") + " --right " + q(tmp.path / "small.png") + common);
    CHECK(r.code == 2);
  }
}

TEST_CASE("sample") {
  TempDir tmp;
  const auto scene = testing::make_scene(2, 100, 40);
  write_depth_png16(scene.depth, tmp.path / "g.png");
  const std::string in = " --input " + q(tmp.path / "g.png");
  REQUIRE(run(tmp, "sample" + in + " --fraction 0.10 --seed 1 --output " + q(tmp.path / "a.png")).code == 0);
  REQUIRE(run(tmp, "sample" + in + " --fraction 0.10 --seed 1 --output " + q(tmp.path / "b.png")).code == 0);
  CHECK(slurp(tmp.path / "a.png") == slurp(tmp.path / "b.png"));
  CHECK(read_depth_png16(tmp.path / "a.png").valid_count() == 400);

  REQUIRE(run(tmp, "sample" + in + " --count 37 --output " + q(tmp.path / "c.png")).code == 0);
  CHECK(read_depth_png16(tmp.path / "c.png").valid_count() == 37);

  CHECK(run(tmp, "sample" + in + " --output " + q(tmp.path / "c.png")).code == 1);
  CHECK(run(tmp, "sample" + in + " --count 5 --fraction 0.1 --output " + q(tmp.path / "c.png")).code == 1);
  CHECK(run(tmp, "sample" + in + " --count 100000 --output " + q(tmp.path / "c.png")).code == 2);

  SUBCASE("config file supplies the fraction; the flag wins") {
    std::ofstream(tmp.path / "c.ini") << "[sample]\nfraction=0.5\nseed=1\n";
    REQUIRE(run(tmp, "--config " + q(tmp.path / "c.ini") + " sample" + in + " --output " +
                         q(tmp.path / "h.png")).code == 0);
    CHECK(read_depth_png16(tmp.path / "h.png").valid_count() == 2000);
    REQUIRE(run(tmp, "--config " + q(tmp.path / "c.ini") + " sample" + in + " --fraction 0.10 --output " +
                         q(tmp.path / "t.png")).code == 0);
    CHECK(slurp(tmp.path / "t.png") == slurp(tmp.path / "a.png"));
  }
}

TEST_CASE("predict and eval") {
  TempDir tmp;
  DFuseNet<float> net(DFuseNetConfig::tiny(), 4);
  save_archive(net.to_archive(), tmp.path / "model.arc");
  const auto scene = testing::make_scene(6, 80, 40);
  write_rgb8(scene.rgb, tmp.path / "rgb.png");
  write_depth_png16(sparsify(scene.depth, SampleSpec::fraction(0.05), 3), tmp.path / "sparse.png");
  fs::create_directories(tmp.path / "pred");
  fs::create_directories(tmp.path / "gt");
  write_depth_png16(scene.depth, tmp.path / "gt" / "rgb.png");

  Run r = run(tmp, "predict --checkpoint " + q(tmp.path / "model.arc") + " --rgb " + q(tmp.path / "rgb.png") +
                       " --sparse " + q(tmp.path / "sparse.png") + " --output " +
                       q(tmp.path / "pred" / "rgb.png"));
  REQUIRE(r.code == 0);
  const DepthMap p = read_depth_png16(tmp.path / "pred" / "rgb.png");
  CHECK(p.width() == 80);
  for (float v : p.values()) {
    CHECK(v > 0.0f);
    CHECK(v < 85.0f);
  }

  SUBCASE("manifest mode writes the same prediction") {
    std::ofstream(tmp.path / "list.txt") << "max_depth=85\nrgb.png\tsparse.png\n";
    r = run(tmp, "predict --checkpoint " + q(tmp.path / "model.arc") + " --manifest " +
                     q(tmp.path / "list.txt") + " --out-dir " + q(tmp.path / "batch") + " --jobs 2");
    REQUIRE(r.code == 0);
    CHECK(slurp(tmp.path / "batch" / "rgb.png") == slurp(tmp.path / "pred" / "rgb.png"));
  }
  SUBCASE("eval against itself reports zero error") {
    r = run(tmp, "eval --pred-dir " + q(tmp.path / "gt") + " --gt-dir " + q(tmp.path / "gt") + " --format kv");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("rmse_mm=0\n") != std::string::npos);
    CHECK(r.out.find("delta1=1\n") != std::string::npos);
    r = run(tmp, "eval --pred-dir " + q(tmp.path / "pred") + " --gt-dir " + q(tmp.path / "gt"));
    REQUIRE(r.code == 0);
    CHECK(r.out.find("RMSE [mm]") != std::string::npos);
    CHECK(r.out.find("n_valid=3200") != std::string::npos);
  }
  SUBCASE("eval needs a prediction for every ground-truth file") {
    write_depth_png16(scene.depth, tmp.path / "gt" / "other.png");
    r = run(tmp, "eval --pred-dir " + q(tmp.path / "pred") + " --gt-dir " + q(tmp.path / "gt"));
    CHECK(r.code == 2);
    CHECK(r.err.find("other.png") != std::string::npos);
  }
  SUBCASE("incompatible checkpoint") {
    std::ofstream(tmp.path / "junk.arc") << "nope";
    r = run(tmp, "predict --checkpoint " + q(tmp.path / "junk.arc") + " --rgb " + q(tmp.path / "rgb.png") +
                     " --sparse " + q(tmp.path / "sparse.png") + " --output " + q(tmp.path / "x.png"));
    CHECK(r.code == 2);
  }
  SUBCASE("non-finite forward values exit with the numeric code") {
    TensorArchive a = net.to_archive();
    for (auto& t : a.tensors)
      if (t.name == "param/head.conv.weight")
        for (float& v : t.values) v = 3e38f;
    save_archive(a, tmp.path / "bad.arc");
    r = run(tmp, "predict --checkpoint " + q(tmp.path / "bad.arc") + " --rgb " + q(tmp.path / "rgb.png") +
                     " --sparse " + q(tmp.path / "sparse.png") + " --output " + q(tmp.path / "x.png"));
    CHECK(r.code == 3);
  }
}

TEST_CASE("train from a manifest and resume") {
  TempDir tmp;
  std::ofstream list(tmp.path / "list.txt");
  list << "max_depth=85\n";
  for (int i = 0; i < 2; ++i) {
    const auto scene = testing::make_scene(40 + i, 128, 64);
    const std::string n = std::to_string(i);
    write_rgb8(scene.rgb, tmp.path / ("rgb" + n + ".png"));
    write_depth_png16(sparsify(scene.depth, SampleSpec::count(500), i), tmp.path / ("s" + n + ".png"));
    write_depth_png16(scene.depth, tmp.path / ("g" + n + ".png"));
    list << "rgb" << n << ".png\ts" << n << ".png\tg" << n << ".png\n";
  }
  list.close();
  const std::string base = "train --manifest " + q(tmp.path / "list.txt") +
                           " --preset tiny --crop-height-px 32 --crop-width-px 64 --beta 0 --seed 3";
  Run r = run(tmp, base + " --epochs 2 --out-dir " + q(tmp.path / "full") + " --log " + q(tmp.path / "full.log"));
  REQUIRE(r.code == 0);
  CHECK(fs::exists(tmp.path / "full" / "epoch_0001.ckpt"));
  CHECK(fs::exists(tmp.path / "full" / "final.ckpt"));
  CHECK(slurp(tmp.path / "full.log").find("step=1 epoch=1") != std::string::npos);

  r = run(tmp, base + " --epochs 2 --resume " + q(tmp.path / "full" / "epoch_0001.ckpt") + " --out-dir " +
                   q(tmp.path / "resumed"));
  REQUIRE(r.code == 0);
  // Metadata records each run's out-dir; everything else must match.
  const TensorArchive a = load_archive(tmp.path / "full" / "final.ckpt");
  const TensorArchive b = load_archive(tmp.path / "resumed" / "final.ckpt");
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    CHECK(a.tensors[i].name == b.tensors[i].name);
    CHECK(a.tensors[i].values == b.tensors[i].values);
  }
  auto ja = nlohmann::json::parse(a.metadata), jb = nlohmann::json::parse(b.metadata);
  ja["train"].erase("checkpoint_dir");
  jb["train"].erase("checkpoint_dir");
  CHECK(ja == jb);

  CHECK(run(tmp, base + " --preset huge --out-dir " + q(tmp.path / "x")).code == 1);
}

TEST_CASE("usage and help") {
  TempDir tmp;
  CHECK(run(tmp, "").code == 1);
  CHECK(run(tmp, "frobnicate").code == 1);
  CHECK(run(tmp, "--help").code == 0);

  const std::map<std::string, std::vector<std::string>> numeric{
      {"fill", {"--max-depth-m", "--initial-kernel-px", "--closing-kernel-px", "--hole-kernel-px",
                "--hole-iterations", "--blur-kernel-px", "--blur-sigma-px"}},
      {"sgm", {"--fx-px", "--baseline-m", "--max-depth-m", "--census-window-px", "--max-disparity-px",
               "--p1", "--p2", "--lr-tolerance-px"}},
      {"sample", {"--count", "--fraction", "--seed"}},
      {"train", {"--epochs", "--batch-size", "--learning-rate", "--weight-decay", "--lr-decay-factor",
                 "--lr-decay-every-epochs", "--alpha", "--beta", "--gamma", "--seed", "--crop-height-px",
                 "--crop-width-px", "--fx-px", "--baseline-m", "--jobs"}},
      {"predict", {"--jobs", "--blur-sigma-px"}},
      {"eval", {"--max-depth-m", "--jobs"}},
  };
  for (const auto& [cmd, flags] : numeric) {
    const Run h = run(tmp, cmd + " --help");
    CHECK(h.code == 0);
    for (const auto& f : flags) {
      INFO(cmd << " " << f);
      const auto at = h.out.find("  " + f + " ");
      REQUIRE(at != std::string::npos);
      const auto next = h.out.find("\n  -", at + 1);
      const std::string entry = h.out.substr(at, next - at);
      CHECK(entry.find('[') != std::string::npos);
    }
  }
}
