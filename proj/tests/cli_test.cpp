#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "skipseg/checkpoint.hpp"
#include "skipseg/dataset.hpp"
#include "skipseg/trainer.hpp"
#include "skipseg/tsv.hpp"

using namespace skipseg;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        const char* cli = std::getenv("SKIPSEG_CLI");
        ASSERT_NE(cli, nullptr) << "SKIPSEG_CLI is not set";
        cli_ = cli;
        dir_ = fs::temp_directory_path() /
               ("skipseg_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    RunResult run(const std::string& args) const {
        const auto out = dir_ / "stdout.txt";
        const auto err = dir_ / "stderr.txt";
        const std::string cmd = "'" + cli_ + "' " + args + " > '" + out.string() + "' 2> '" + err.string() + "'";
        const int status = std::system(cmd.c_str());
        RunResult r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = slurp(out);
        r.err = slurp(err);
        return r;
    }

    std::string path(const std::string& rel) const { return (dir_ / rel).string(); }

    std::string cli_;
    fs::path dir_;
};

std::map<std::string, double> read_metrics(const std::string& text) {
    std::istringstream in(text);
    std::string header, values;
    std::getline(in, header);
    std::getline(in, values);
    const auto h = tsv::split(header);
    const auto v = tsv::split(values);
    std::map<std::string, double> m;
    for (std::size_t i = 0; i < h.size() && i < v.size(); ++i) m[h[i]] = v[i] == "NA" ? NAN : std::stod(v[i]);
    return m;
}

int count_lines(const std::string& text) { return static_cast<int>(std::count(text.begin(), text.end(), '\n')); }

}  // namespace

TEST_F(CliTest, GenDataCountContract) {
    const auto r = run("gen-data --seed 1 --count 64 --classes 3 --size 134 --out " + path("d"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("manifest.tsv"), std::string::npos);
    int images = 0, masks = 0;
    for (const auto& e : fs::directory_iterator(path("d/images"))) images += e.path().extension() == ".ppm";
    for (const auto& e : fs::directory_iterator(path("d/masks"))) masks += e.path().extension() == ".pgm";
    EXPECT_EQ(images, 64);
    EXPECT_EQ(masks, 64);
    EXPECT_EQ(count_lines(slurp(path("d/manifest.tsv"))), 65);
}

TEST_F(CliTest, GenDataZeroCount) {
    const auto r = run("gen-data --count 0 --out " + path("d"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(path("d/manifest.tsv")), "id\tsplit\n");
}

TEST_F(CliTest, GenDataRerunIsByteIdentical) {
    ASSERT_EQ(run("gen-data --seed 3 --count 5 --size 24 --out " + path("a")).code, 0);
    ASSERT_EQ(run("gen-data --seed 3 --count 5 --size 24 --out " + path("b")).code, 0);
    for (const auto& e : fs::recursive_directory_iterator(path("a"))) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), path("a"));
        EXPECT_EQ(slurp(e.path()), slurp(fs::path(path("b")) / rel)) << rel;
    }
}

TEST_F(CliTest, GenDataUnwritableDirectoryIsExitTwo) {
    {
        std::ofstream blocker(path("file"));
        blocker << "x";
    }
    const auto r = run("gen-data --count 2 --out " + path("file/sub"));
    EXPECT_EQ(r.code, 2);
    EXPECT_FALSE(r.err.empty());
}

TEST_F(CliTest, BadFlagIsExitTwo) {
    EXPECT_EQ(run("gen-data --count nope --out " + path("d")).code, 2);
    EXPECT_EQ(run("no-such-command").code, 2);
    EXPECT_EQ(run("train --data " + path("missing") + " --out " + path("c.sksg")).code, 2);
}

TEST_F(CliTest, GradcheckPassesAndReportsEveryOp) {
    const auto r = run("gradcheck --out " + path("g.tsv"));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto report = slurp(path("g.tsv"));
    for (const char* op : {"conv2d", "relu", "downsample2x", "upsample_bilinear", "upsample_nearest", "add",
                           "softmax_cross_entropy", "network_baseline", "network_skip"}) {
        EXPECT_NE(report.find(op), std::string::npos) << op;
    }
}

TEST_F(CliTest, GradcheckFaultInjectionFailsNamingTheOp) {
    const auto r = run("gradcheck --inject-fault conv2d");
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("conv2d"), std::string::npos);
}

TEST_F(CliTest, ZeroEpochCheckpointEqualsInitialization) {
    ASSERT_EQ(run("gen-data --count 4 --size 16 --out " + path("d")).code, 0);
    const auto r = run("train --data " + path("d") + " --out " + path("c.sksg") +
                       " --epochs 0 --seed 5 --tap 1 --stages 4,8 --grid 8");
    ASSERT_EQ(r.code, 0) << r.err;
    NetworkConfig cfg;
    cfg.input_size = 16;
    cfg.stage_channels = {4, 8};
    cfg.n_classes = 4;
    cfg.grid_size = 8;
    auto expected = build<float>(cfg, SkipSpec{1, 3}, 5);
    const auto bytes = serialize_checkpoint(expected);
    EXPECT_EQ(slurp(path("c.sksg")), std::string(bytes.begin(), bytes.end()));
}

TEST_F(CliTest, VersionMismatchIsExitThree) {
    ASSERT_EQ(run("gen-data --count 3 --size 16 --out " + path("d")).code, 0);
    ASSERT_EQ(run("train --data " + path("d") + " --out " + path("c.sksg") + " --epochs 0 --stages 4,8 --grid 8").code, 0);
    auto bytes = slurp(path("c.sksg"));
    bytes[4] = 9;
    {
        std::ofstream out(path("old.sksg"), std::ios::binary);
        out << bytes;
    }
    const auto r = run("evaluate --checkpoint " + path("old.sksg") + " --data " + path("d"));
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("version"), std::string::npos);
    EXPECT_EQ(run("export-heatmaps --checkpoint " + path("old.sksg") + " --data " + path("d") + " --out " + path("h")).code, 3);
}

TEST_F(CliTest, OverfitSingleSampleEvaluatesAboveNinetyFive) {
    ASSERT_EQ(run("gen-data --seed 2 --count 1 --val-count 0 --size 16 --out " + path("d")).code, 0);
    const auto t = run("train --data " + path("d") + " --out " + path("c.sksg") +
                       " --tap 0 --stages 8,16 --grid 16 --epochs 200 --batch-size 1 --lr 0.05");
    ASSERT_EQ(t.code, 0) << t.err;
    const auto r = run("evaluate --checkpoint " + path("c.sksg") + " --data " + path("d") + " --split train");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto m = read_metrics(r.out);
    EXPECT_GE(m.at("mean_iou"), 0.95);
    EXPECT_TRUE(m.count("iou_3"));
}

TEST_F(CliTest, RandomInitializationScoresNearBackgroundPrior) {
    // Balanced data: each quadrant holds one of 4 classes, rotated so every cell position sees every
    // class equally often, and image content is noise unrelated to the labels.
    Dataset ds;
    ds.n_classes = 4;
    Rng rng(17);
    for (int i = 0; i < 16; ++i) {
        Sample s;
        s.id = "b" + std::to_string(i);
        s.split = "val";
        s.image = Tensor<float>(Shape{1, 3, 32, 32});
        for (auto& v : s.image.data()) v = static_cast<float>(rng.uniform());
        s.mask = LabelImage(32, 32, 0);
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) s.mask.at(y, x) = ((y / 16) * 2 + x / 16 + i) % 4;
        ds.samples.push_back(std::move(s));
    }
    save_dataset(ds, path("d"));
    const double prior = 0.25;
    for (int seed : {1, 2, 3}) {
        ASSERT_EQ(run("train --data " + path("d") + " --out " + path("c.sksg") + " --epochs 0 --grid 16 --seed " +
                      std::to_string(seed)).code, 0);
        const auto r = run("evaluate --checkpoint " + path("c.sksg") + " --data " + path("d"));
        ASSERT_EQ(r.code, 0) << r.err;
        EXPECT_NEAR(read_metrics(r.out).at("pixel_acc"), prior, 0.15) << "seed " << seed;
    }
}

TEST_F(CliTest, AblateRowCounts) {
    ASSERT_EQ(run("gen-data --count 6 --size 16 --out " + path("d")).code, 0);
    const std::string common = " --data " + path("d") + " --stages 4,8 --grid 8 --epochs 1";
    auto r = run("ablate" + common + " --seeds 1 --out " + path("base.tsv"));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto base = slurp(path("base.tsv"));
    EXPECT_EQ(count_lines(base), 3);  // header, baseline row, best-connection trailer
    EXPECT_NE(base.find("\nnone\tNA\t1\t"), std::string::npos);

    r = run("ablate" + common + " --taps 1 --seeds 1,2 --out " + path("two.tsv") + " --timing " + path("t.tsv"));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto two = slurp(path("two.tsv"));
    EXPECT_EQ(count_lines(two), 6);
    EXPECT_EQ(count_lines(slurp(path("t.tsv"))), 5);
    EXPECT_EQ(two.find("wall_time"), std::string::npos);

    ASSERT_EQ(run("ablate" + common + " --taps 1 --seeds 1,2 --out " + path("again.tsv")).code, 0);
    EXPECT_EQ(slurp(path("again.tsv")), two);
}

TEST_F(CliTest, ExportHeatmapsFileCountsAndMissingIds) {
    ASSERT_EQ(run("gen-data --count 3 --classes 3 --size 16 --out " + path("d")).code, 0);
    ASSERT_EQ(run("train --data " + path("d") + " --out " + path("c.sksg") + " --epochs 0 --tap 1 --stages 4,8 --grid 8").code, 0);
    auto r = run("export-heatmaps --checkpoint " + path("c.sksg") + " --data " + path("d") + " --ids 00000,nope --out " +
                 path("h"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.err.find("nope"), std::string::npos);
    int top = 0, skip = 0;
    for (const auto& e : fs::directory_iterator(path("h"))) top += e.is_regular_file();
    for (const auto& e : fs::directory_iterator(path("h/skip"))) skip += e.is_regular_file();
    EXPECT_EQ(top, 5);
    EXPECT_EQ(skip, 4);
    EXPECT_TRUE(fs::exists(path("h/00000_argmax.pgm")));
    EXPECT_TRUE(fs::exists(path("h/00000_3.pgm")));

    r = run("export-heatmaps --checkpoint " + path("c.sksg") + " --data " + path("d") + " --ids nope --out " + path("h2"));
    EXPECT_EQ(r.code, 2);

    ASSERT_EQ(run("train --data " + path("d") + " --out " + path("b.sksg") + " --epochs 0 --stages 4,8 --grid 8").code, 0);
    ASSERT_EQ(run("export-heatmaps --checkpoint " + path("b.sksg") + " --data " + path("d") + " --ids 00001 --out " +
                  path("h3")).code, 0);
    EXPECT_FALSE(fs::exists(path("h3/skip")));
}

TEST_F(CliTest, ConfigFileIsOverriddenByFlags) {
    {
        std::ofstream cfg(path("run.toml"));
        cfg << "[gen-data]\ncount = 5\nsize = 20\nseed = 9\n";
    }
    const auto r = run("--config " + path("run.toml") + " gen-data --count 2 --out " + path("d"));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto ds = load_dataset(path("d"));
    ASSERT_EQ(ds.size(), 2u);
    EXPECT_EQ(ds.samples[0].image.height(), 20);
    EXPECT_EQ(ds.samples[0].mask, generate(9, 2, 3, 20).samples[0].mask);
}
