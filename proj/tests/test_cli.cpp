#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "eqlm/checkpoint.hpp"
#include "eqlm/data.hpp"
#include "eqlm/image_io.hpp"
#include "eqlm/trainer.hpp"

using namespace eqlm;

namespace {

const fs::path kData = EQLM_TEST_DATA;
const std::string kCli = EQLM_CLI;
const fs::path kImages = kData / "mnist35-images.idx3-ubyte";

struct CliRun {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("eqlm_cli_" + std::string(info->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override {
    if (!HasFailure()) fs::remove_all(dir_);
  }

  CliRun run(const std::string& args) {
    const fs::path out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = kCli + " " + args + " > " + out.string() + " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  }

  // A few digits written as PNG files.
  fs::path digit_dir(int count, const std::string& name = "digits") {
    const fs::path d = dir_ / name;
    fs::create_directories(d);
    auto samples = load_idx(kImages, kData / "mnist35-labels.idx1-ubyte", 3);
    for (int i = 0; i < count; ++i) write_png(d / ("d" + std::to_string(i) + ".png"), samples[i].image);
    return d;
  }

  // Detector checkpoint with MNIST preprocessing. A large `stddev` gives sharp,
  // image-dependent maps since the last conv is not followed by batchnorm.
  fs::path detector_checkpoint(int k, double stddev, bool zero = false) {
    Detector<float> det(k, 1);
    det.init(11, stddev);
    if (zero)
      for (auto& p : det.network().params())
        if (p.trainable) std::fill(p.value.begin(), p.value.end(), 0.0f);
    Checkpoint ck;
    ck.manifest["preprocess"] = to_json(PreprocessSpec::mnist());
    put_detector(ck, det);
    const fs::path p = dir_ / "det.ckpt";
    save_checkpoint(ck, p);
    return p;
  }

  fs::path write(const std::string& name, const std::string& text) {
    std::ofstream(dir_ / name) << text;
    return dir_ / name;
  }

  fs::path dir_;
};

struct CoordRecord {
  int landmark;
  double x, y, px, py;
};

std::map<std::string, std::vector<CoordRecord>> read_coords(const fs::path& p) {
  std::map<std::string, std::vector<CoordRecord>> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string id;
    CoordRecord r{};
    ls >> id >> r.landmark >> r.x >> r.y >> r.px >> r.py;
    out[id].push_back(r);
  }
  return out;
}

const char* kTinyConfig = R"({"batch_size": 4, "max_val_samples": 4, "steps_per_epoch": 2, "max_epochs": 1})";

}  // namespace

TEST_F(Cli, HelpListsDefaultsAndMarksReferenceValues) {
  const CliRun r = run("train --help");
  EXPECT_EQ(r.code, 0);
  for (const char* flag : {"--config", "--seed", "--out", "--data", "--digit", "--landmarks"})
    EXPECT_NE(r.out.find(flag), std::string::npos) << flag;
  EXPECT_NE(r.out.find("[7 [ref]]"), std::string::npos);
  EXPECT_NE(r.out.find("learning_rate [ref]: 0.0001"), std::string::npos);
  EXPECT_NE(r.out.find("\"gamma\":500.0"), std::string::npos);
  const CliRun e = run("eval --help");
  EXPECT_NE(e.out.find("--norm TEXT:{iod,width} [width]"), std::string::npos) << e.out;
  EXPECT_NE(e.out.find("--annotations"), std::string::npos);
  EXPECT_NE(e.out.find("--checkpoint"), std::string::npos);
}

TEST_F(Cli, RequiresExactlyOneCommand) {
  EXPECT_NE(run("").code, 0);
  EXPECT_NE(run("detect eval").code, 0);
}

TEST_F(Cli, MissingDatasetNamesThePath) {
  const CliRun r = run("train --data " + (dir_ / "nowhere.idx").string() + " --out " + (dir_ / "o").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("nowhere.idx"), std::string::npos) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
}

TEST_F(Cli, TrainTwiceWithSameSeedGivesIdenticalLogs) {
  const fs::path cfg = write("tiny.json", kTinyConfig);
  const std::string common = "train --quiet --config " + cfg.string() + " --data " + kImages.string() +
                             " --digit 3 --limit 24 --out ";
  ASSERT_EQ(run(common + (dir_ / "a").string() + " --seed 5").code, 0);
  ASSERT_EQ(run(common + (dir_ / "b").string() + " --seed 5").code, 0);
  const std::string log = slurp(dir_ / "a" / "train_log.jsonl");
  EXPECT_FALSE(log.empty());
  EXPECT_EQ(log, slurp(dir_ / "b" / "train_log.jsonl"));
  EXPECT_EQ(slurp(dir_ / "a" / "detector.ckpt"), slurp(dir_ / "b" / "detector.ckpt"));
  ASSERT_EQ(run(common + (dir_ / "c").string() + " --seed 6").code, 0);
  EXPECT_NE(log, slurp(dir_ / "c" / "train_log.jsonl"));
}

TEST_F(Cli, FinetuneWithMismatchedLandmarksIsConfigError) {
  const fs::path cfg = write("tiny.json", kTinyConfig);
  const std::string data = " --data " + kImages.string() + " --digit 3 --limit 12 --quiet";
  ASSERT_EQ(run("train --config " + cfg.string() + data + " --out " + (dir_ / "a").string()).code, 0);
  const std::string ck = (dir_ / "a" / "detector.ckpt").string();
  const CliRun bad = run("finetune --from " + ck + " --landmarks 5" + data + " --out " + (dir_ / "b").string());
  EXPECT_NE(bad.code, 0);
  EXPECT_NE(bad.err.find("landmarks"), std::string::npos) << bad.err;
  const CliRun ok = run("finetune --from " + ck + data + " --out " + (dir_ / "c").string());
  EXPECT_EQ(ok.code, 0) << ok.err;
  const json m = read_checkpoint_manifest(dir_ / "c" / "detector.ckpt");
  EXPECT_EQ(m.at("created_by"), "finetune");
  EXPECT_EQ(m.at("lineage").size(), 1u);
}

TEST_F(Cli, DetectZeroWeightsPutsMarkersAtCenter) {
  const fs::path ck = detector_checkpoint(4, 0.01, true);
  const fs::path d = digit_dir(3);
  ASSERT_EQ(run("detect --checkpoint " + ck.string() + " --data " + d.string() + " --out " + (dir_ / "o").string()).code, 0);
  const auto coords = read_coords(dir_ / "o" / "landmarks.txt");
  ASSERT_EQ(coords.size(), 3u);
  for (const auto& [id, recs] : coords) {
    ASSERT_EQ(recs.size(), 4u);
    for (const auto& r : recs) {
      EXPECT_NEAR(r.x, 0.0, 1e-6);
      EXPECT_NEAR(r.y, 0.0, 1e-6);
    }
    EXPECT_TRUE(fs::exists(dir_ / "o" / "overlays" / (fs::path(id).stem().string() + ".png")));
  }
}

TEST_F(Cli, DetectOneImageRoundTripsCoordinates) {
  const fs::path ck = detector_checkpoint(5, 0.5);
  const fs::path d = digit_dir(1);
  const fs::path img = d / "d0.png";
  ASSERT_EQ(run("detect --checkpoint " + ck.string() + " --data " + img.string() + " --out " + (dir_ / "o").string()).code, 0);
  const auto coords = read_coords(dir_ / "o" / "landmarks.txt");
  ASSERT_EQ(coords.size(), 1u);
  int overlays = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "o" / "overlays")) overlays += e.is_regular_file();
  EXPECT_EQ(overlays, 1);
  const Detector<float> det = get_detector(load_checkpoint(ck));
  const Sample s{read_image(img), {}, "d0.png", -1};
  const auto expected = det.detect(preprocess(s, PreprocessSpec::mnist())).landmarks[0];
  const auto& recs = coords.at("d0.png");
  ASSERT_EQ(recs.size(), expected.size());
  const Frames f = frames_for(PreprocessSpec::mnist(), 28, 28);
  for (std::size_t k = 0; k < recs.size(); ++k) {
    EXPECT_NEAR(recs[k].x, expected[k].x, 1e-6);
    EXPECT_NEAR(recs[k].y, expected[k].y, 1e-6);
    const Vec2 px = norm_to_pixel(f.pad.inverse(f.crop(expected[k])), 28, 28);
    EXPECT_NEAR(recs[k].px, px.x, 1e-6);
    EXPECT_NEAR(recs[k].py, px.y, 1e-6);
  }
}

TEST_F(Cli, DetectSkipsUnreadableImages) {
  const fs::path ck = detector_checkpoint(3, 0.01);
  const fs::path d = digit_dir(2);
  std::ofstream(d / "broken.png") << "not a png";
  const CliRun r = run("detect --checkpoint " + ck.string() + " --data " + d.string() + " --out " + (dir_ / "o").string());
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("broken.png"), std::string::npos);
  EXPECT_EQ(read_coords(dir_ / "o" / "landmarks.txt").size(), 2u);

  const fs::path bad = dir_ / "bad";
  fs::create_directories(bad);
  std::ofstream(bad / "a.png") << "junk";
  std::ofstream(bad / "b.pgm") << "P5 junk";
  EXPECT_NE(run("detect --checkpoint " + ck.string() + " --data " + bad.string() + " --out " + (dir_ / "p").string()).code,
            0);
}

TEST_F(Cli, EvalGroundTruthAsPredictionsIsZero) {
  const fs::path d = digit_dir(3);
  const fs::path ann = write("gt.txt", "d0.png 3 4 20 5 12 20\nd1.png 4 4 21 6 13 22\nd2.png 5 5 19 5 14 21\n");
  for (const char* norm : {"width", "iod"}) {
    const CliRun r = run("eval --data " + d.string() + " --annotations " + ann.string() + " --predictions " + ann.string() +
                      " --norm " + norm + " --out " + (dir_ / "o").string());
    ASSERT_EQ(r.code, 0) << r.err;
    const json rep = json::parse(slurp(dir_ / "o" / "eval.json"));
    EXPECT_EQ(rep.at("mean_error").get<double>(), 0.0);
    EXPECT_EQ(rep.at("images").get<int>(), 3);
  }
}

TEST_F(Cli, RegressThenEvalRecoversLinearTargets) {
  const fs::path ck = detector_checkpoint(4, 0.5);
  const fs::path d = digit_dir(40);
  ASSERT_EQ(run("detect --checkpoint " + ck.string() + " --data " + d.string() + " --out " + (dir_ / "det").string()).code,
            0);
  // Target 0 copies landmark 1; target 1 is the midpoint of landmarks 0 and 2.
  // Both are affine combinations, so they stay linear under the view transform.
  std::ostringstream ann;
  ann.precision(12);
  for (const auto& [id, r] : read_coords(dir_ / "det" / "landmarks.txt"))
    ann << id << ' ' << r[1].px << ' ' << r[1].py << ' ' << (r[0].px + r[2].px) / 2 << ' ' << (r[0].py + r[2].py) / 2
        << '\n';
  const fs::path annf = write("targets.txt", ann.str());
  const CliRun reg = run("regress --checkpoint " + ck.string() + " --data " + d.string() + " --annotations " +
                      annf.string() + " --out " + (dir_ / "reg").string());
  ASSERT_EQ(reg.code, 0) << reg.err;
  const CliRun ev = run("eval --checkpoint " + (dir_ / "reg" / "regressor.ckpt").string() + " --data " + d.string() +
                     " --annotations " + annf.string() + " --out " + (dir_ / "ev").string());
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_LT(json::parse(slurp(dir_ / "ev" / "eval.json")).at("mean_error").get<double>(), 1e-3);

  std::map<std::pair<int, int>, double> edges;
  std::ifstream g(dir_ / "reg" / "contribution_graph.txt");
  std::string line;
  while (std::getline(g, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    int s, t;
    double w;
    ls >> s >> t >> w;
    edges[{s, t}] = w;
  }
  ASSERT_EQ(edges.size(), 3u);
  EXPECT_NEAR(edges.at({1, 0}), 1.0, 1e-2);
  EXPECT_NEAR(edges.at({0, 1}), 0.5, 1e-2);
  EXPECT_NEAR(edges.at({2, 1}), 0.5, 1e-2);
  EXPECT_TRUE(fs::exists(dir_ / "reg" / "contribution_graph.png"));
}

TEST_F(Cli, EvalWithoutRegressorIsAnError) {
  const fs::path ck = detector_checkpoint(3, 0.01);
  const fs::path d = digit_dir(1);
  const fs::path ann = write("gt.txt", "d0.png 3 4 20 5\n");
  const CliRun r = run("eval --checkpoint " + ck.string() + " --data " + d.string() + " --annotations " + ann.string() +
                    " --out " + (dir_ / "o").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("regress"), std::string::npos);
}

TEST_F(Cli, WarpDemoStrips) {
  const fs::path zero = write("zero.json", R"({"g2": "zero"})");
  const std::string src = " --data " + kImages.string() + " --digit 3 --index 2";
  ASSERT_EQ(run("warp-demo --config " + zero.string() + src + " --count 3 --out " + (dir_ / "z").string()).code, 0);
  const auto strip = read_png(dir_ / "z" / "warp_demo.png");
  ASSERT_EQ(strip.height(), 44);
  ASSERT_EQ(strip.width(), 4 * 44 + 3 * 2);
  for (int t = 1; t < 4; ++t)
    for (int y = 0; y < 44; ++y)
      for (int x = 0; x < 44; ++x) ASSERT_EQ(strip(0, y, x, 0), strip(0, y, t * 46 + x, 0));

  const std::string warped = "warp-demo" + src + " --count 4 --seed 9 --out ";
  ASSERT_EQ(run(warped + (dir_ / "a").string()).code, 0);
  ASSERT_EQ(run(warped + (dir_ / "b").string()).code, 0);
  EXPECT_EQ(slurp(dir_ / "a" / "warp_demo.png"), slurp(dir_ / "b" / "warp_demo.png"));
  EXPECT_EQ(json::parse(slurp(dir_ / "a" / "warp_demo.json")).at("seeds").size(), 4u);

  ASSERT_EQ(run("warp-demo" + src + " --count 0 --out " + (dir_ / "n").string()).code, 0);
  EXPECT_EQ(read_png(dir_ / "n" / "warp_demo.png").width(), 44);
}

TEST_F(Cli, GradcheckPasses) {
  const CliRun r = run("gradcheck --instances 3 --out " + (dir_ / "g").string());
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}
