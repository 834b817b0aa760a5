#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "deepscm/csv.hpp"

namespace fs = std::filesystem;

namespace {

const char* kSmallConfig =
    "preset = desk\n"
    "epochs1 = 2\nepochs2 = 2\nepochs3 = 1\n"
    "hidden = 16\ndataset_size = 300\neval_trials = 2\n";

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() / (std::string("deepscm_cli_") + info->name());
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        config_ = write("run.cfg", kSmallConfig);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string write(const std::string& name, const std::string& text) const {
        const fs::path p = dir_ / name;
        std::ofstream(p) << text;
        return p.string();
    }

    int run(const std::string& args) const {
        const std::string cmd = std::string(DEEPSCM_CLI_PATH) + " " + args + " > " +
                                (dir_ / "stdout.txt").string() + " 2>&1";
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }

    std::string out_args(const std::string& sub) const { return "--config " + config_ + " --out " + out() + " " + sub; }
    std::string out() const { return (dir_ / "out").string(); }

    static std::string slurp(const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    fs::path dir_;
    std::string config_;
};

} // namespace

TEST_F(Cli, TrainWritesArtifactsAndEvalReproducesMetrics) {
    ASSERT_EQ(run(out_args("train")), 0) << slurp(dir_ / "stdout.txt");
    for (const char* f : {"metrics.csv", "checkpoint.bin", "training.csv", "decorrelator.csv"}) {
        EXPECT_TRUE(fs::exists(fs::path(out()) / f)) << f;
    }
    const deepscm::Table m = deepscm::read_csv((fs::path(out()) / "metrics.csv").string());
    EXPECT_EQ(m.header.front(), "mode");
    ASSERT_EQ(m.rows.size(), 1u);
    EXPECT_EQ(m.rows[0][0], "deepscm");
    const std::string trained = slurp(fs::path(out()) / "metrics.csv");

    const std::string ckpt = (fs::path(out()) / "checkpoint.bin").string();
    const std::string eval_dir = (dir_ / "eval").string();
    ASSERT_EQ(run("eval --config " + config_ + " --out " + eval_dir + " --checkpoint " + ckpt), 0);
    EXPECT_EQ(slurp(fs::path(eval_dir) / "metrics.csv"), trained);
}

TEST_F(Cli, SeedFlagOverridesConfig) {
    ASSERT_EQ(run(out_args("train --seed 7")), 0);
    const deepscm::Table m = deepscm::read_csv((fs::path(out()) / "metrics.csv").string());
    EXPECT_EQ(m.rows.at(0).back(), "7");
}

TEST_F(Cli, DumpConstellation) {
    ASSERT_EQ(run(out_args("dump-constellation")), 0);
    const deepscm::Table t = deepscm::read_csv((fs::path(out()) / "constellation.csv").string());
    EXPECT_EQ(t.header, (std::vector<std::string>{"point_index", "i", "q"}));
    EXPECT_EQ(t.rows.size(), 16u);
}

TEST_F(Cli, HistogramFromCheckpoint) {
    ASSERT_EQ(run(out_args("train")), 0);
    const std::string ckpt = (fs::path(out()) / "checkpoint.bin").string();
    ASSERT_EQ(run(out_args("hist --trials 50 --checkpoint " + ckpt)), 0);
    const deepscm::Table t = deepscm::read_csv((fs::path(out()) / "hist.csv").string());
    EXPECT_EQ(t.header, (std::vector<std::string>{"i", "q", "count"}));
    long total = 0;
    for (const auto& r : t.rows) total += std::stol(r[2]);
    EXPECT_EQ(total, 50 * 8);
}

TEST_F(Cli, SweepsWriteOneRowPerPoint) {
    ASSERT_EQ(run(out_args("sweep-paf --values 0.6,0.8")), 0);
    EXPECT_EQ(deepscm::read_csv((fs::path(out()) / "metrics.csv").string()).rows.size(), 2u);
    ASSERT_EQ(run(out_args("sweep-rate --values 2")), 0);
    EXPECT_EQ(deepscm::read_csv((fs::path(out()) / "metrics.csv").string()).rows.size(), 2u);
    ASSERT_EQ(run(out_args("sweep-snr --values 10")), 0);
    const deepscm::Table t = deepscm::read_csv((fs::path(out()) / "metrics.csv").string());
    ASSERT_EQ(t.rows.size(), 2u);
    EXPECT_EQ(t.rows[1][0], "cm_joint");
}

TEST_F(Cli, ConfigErrorsExitTwo) {
    EXPECT_EQ(run("--config " + write("bad.cfg", "epochz = 1\n") + " --out " + out() + " train"), 2);
    EXPECT_EQ(run("--config " + write("bad2.cfg", "paf = 0.4\n") + " --out " + out() + " train"), 2);
    EXPECT_EQ(run("--config " + write("bad3.cfg", "snr2_db = -10\n") + " --out " + out() + " train"), 2);
    EXPECT_EQ(run(out_args("sweep-paf --values 0.6,abc")), 2);
    EXPECT_EQ(run(out_args("sweep-rate --values -2")), 2);
    EXPECT_EQ(run("frobnicate"), 2);
    EXPECT_EQ(run(""), 2);
}

TEST_F(Cli, ContractViolationsExitThree) {
    EXPECT_EQ(run(out_args("sweep-paf --values 0.6,1.5")), 3);
    EXPECT_EQ(run(out_args("sweep-snr --values -20")), 3);
    EXPECT_EQ(run(out_args("sweep-rate --values 0")), 3);
}

TEST_F(Cli, IoErrorsExitFour) {
    EXPECT_EQ(run("--config " + (dir_ / "missing.cfg").string() + " train"), 4);
    EXPECT_EQ(run(out_args("eval --checkpoint " + (dir_ / "missing.bin").string())), 4);
    const std::string blocker = write("file", "x");
    EXPECT_EQ(run("--config " + config_ + " --out " + blocker + "/sub dump-constellation"), 4);
}

TEST_F(Cli, HelpSucceeds) {
    EXPECT_EQ(run("--help"), 0);
    EXPECT_NE(slurp(dir_ / "stdout.txt").find("sweep-paf"), std::string::npos);
}
