#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <sstream>

#include "cli.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using msti::cli::run;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Small scene shared by the tests below, generated once.
const fs::path& tiny_data() {
    static const fs::path root = [] {
        const auto dir = msti::testing::scratch_dir("cli_data");
        const int rc = run({"msti", "gen-data", "--out", (dir / "data").string(), "--canvas", "32", "--train-videos",
                            "2", "--test-videos", "2", "--train-frames", "8", "--test-frames", "12"});
        if (rc != 0) throw std::runtime_error("gen-data failed");
        return dir / "data";
    }();
    return root;
}

std::vector<std::string> tiny_net() { return {"--resolution", "32", "--batch-size", "4"}; }

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

}  // namespace

TEST(Cli, HelpOnEverySubcommand) {
    for (const char* sub : {"gen-data", "train", "eval", "score", "ablate"}) {
        ::testing::internal::CaptureStdout();
        const int rc = run({"msti", sub, "--help"});
        const std::string out = ::testing::internal::GetCapturedStdout();
        EXPECT_EQ(rc, 0) << sub;
        EXPECT_NE(out.find("Usage"), std::string::npos) << sub;
    }
    ::testing::internal::CaptureStdout();
    EXPECT_EQ(run({"msti", "--help"}), 0);
    ::testing::internal::GetCapturedStdout();
}

TEST(Cli, MissingSubcommandOrRequiredOptionFails) {
    ::testing::internal::CaptureStderr();
    EXPECT_NE(run({"msti"}), 0);
    EXPECT_NE(run({"msti", "train"}), 0);
    ::testing::internal::GetCapturedStderr();
}

TEST(Cli, UnknownConfigKeysAreListed) {
    const auto dir = msti::testing::scratch_dir("cli_badcfg");
    std::ofstream(dir / "run.ini") << "epochs = 2\nbogus = 1\n[train]\nalso_bogus = 3\n";
    ::testing::internal::CaptureStderr();
    const int rc = run({"msti", "train", "--data", tiny_data().string(), "--out", (dir / "out").string(), "--config",
                        (dir / "run.ini").string()});
    const std::string err = ::testing::internal::GetCapturedStderr();
    EXPECT_NE(rc, 0);
    EXPECT_NE(err.find("bogus"), std::string::npos) << err;
    EXPECT_NE(err.find("also_bogus"), std::string::npos) << err;
    EXPECT_FALSE(fs::exists(dir / "out" / "checkpoint.msti"));
}

TEST(Cli, FlagsOverrideFileOverridesDefault) {
    const auto dir = msti::testing::scratch_dir("cli_precedence");
    std::ofstream(dir / "run.ini") << "[train]\nepochs = 1\nlr = 0.005\nmax-steps = 1\n";
    const int rc = run(concat({"msti", "train", "--data", tiny_data().string(), "--out", (dir / "out").string(),
                               "--config", (dir / "run.ini").string(), "--lr", "0.002"},
                              tiny_net()));
    ASSERT_EQ(rc, 0);
    const std::string resolved = slurp(dir / "out" / "config.resolved.ini");
    EXPECT_NE(resolved.find("lr=0.002"), std::string::npos) << resolved;
    EXPECT_NE(resolved.find("epochs=1"), std::string::npos) << resolved;
    EXPECT_NE(resolved.find("delta=0.1"), std::string::npos) << resolved;
    EXPECT_EQ(slurp(dir / "out" / "FORMAT_VERSION"), std::string(msti::cli::kFormatVersion) + "\n");

    // The frozen copy reproduces the run configuration when fed back.
    const int again = run({"msti", "train", "--data", tiny_data().string(), "--out", (dir / "again").string(),
                           "--config", (dir / "out" / "config.resolved.ini").string()});
    ASSERT_EQ(again, 0);
    const std::string again_resolved = slurp(dir / "again" / "config.resolved.ini");
    for (const char* line : {"lr=0.002", "epochs=1", "max-steps=1", "resolution=32", "batch-size=4"})
        EXPECT_NE(again_resolved.find(line), std::string::npos) << line;
}

TEST(Cli, TrainEvalScoreAreReproducible) {
    const auto dir = msti::testing::scratch_dir("cli_repro");
    for (const char* name : {"a", "b"}) {
        const fs::path out = dir / name;
        ASSERT_EQ(run(concat({"msti", "train", "--data", tiny_data().string(), "--out", (out / "train").string(),
                              "--epochs", "1"},
                             tiny_net())),
                  0);
        ASSERT_EQ(run({"msti", "eval", "--data", tiny_data().string(), "--checkpoint",
                       (out / "train" / "checkpoint.msti").string(), "--out", (out / "eval").string(), "--error-maps",
                       "true"}),
                  0);
        EXPECT_TRUE(fs::exists(out / "eval" / "summary.json"));
        EXPECT_TRUE(fs::exists(out / "eval" / "error_maps" / "video_000" / "err_000004.png"));
        EXPECT_TRUE(fs::exists(out / "train" / "train_log.jsonl"));
    }
    const std::string a = slurp(dir / "a" / "eval" / "scores.csv");
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, slurp(dir / "b" / "eval" / "scores.csv"));

    ASSERT_EQ(run({"msti", "score", "--scores", (dir / "a" / "eval" / "scores.csv").string(), "--out",
                   (dir / "rescored").string(), "--tau", "0.7"}),
              0);
    EXPECT_EQ(slurp(dir / "rescored" / "scores.csv"), a);
}

TEST(Cli, AblateEmitsFiveVariantRows) {
    const auto dir = msti::testing::scratch_dir("cli_ablate");
    ::testing::internal::CaptureStdout();
    const int rc =
        run(concat({"msti", "ablate", "--data", tiny_data().string(), "--out", dir.string(), "--max-steps", "1"},
                   tiny_net()));
    const std::string out = ::testing::internal::GetCapturedStdout();
    ASSERT_EQ(rc, 0);
    int rows = 0;
    std::string letters;
    std::istringstream lines(out);
    for (std::string line; std::getline(lines, line);) {
        if (line.size() > 4 && line[0] == '|' && line[1] == ' ' && line[3] == ' ' && line[2] >= 'A' && line[2] <= 'E') {
            ++rows;
            letters += line[2];
        }
    }
    EXPECT_EQ(rows, 5) << out;
    EXPECT_EQ(letters, "ABCDE");
    const std::string table = slurp(dir / "ablation.md");
    ASSERT_GE(out.size(), table.size());
    EXPECT_EQ(out.substr(out.size() - table.size()), table);
    EXPECT_TRUE(fs::exists(dir / "E_seed0" / "checkpoint.msti"));
}

TEST(Cli, EvalOnUnlabeledSplitSkipsAuc) {
    const auto dir = msti::testing::scratch_dir("cli_unlabeled");
    ASSERT_EQ(run(concat({"msti", "train", "--data", tiny_data().string(), "--out", (dir / "t").string(),
                          "--max-steps", "1"},
                         tiny_net())),
              0);
    ::testing::internal::CaptureStdout();
    const int rc = run({"msti", "eval", "--data", tiny_data().string(), "--split", "train", "--checkpoint",
                        (dir / "t" / "checkpoint.msti").string(), "--out", (dir / "e").string()});
    const std::string out = ::testing::internal::GetCapturedStdout();
    EXPECT_EQ(rc, 0);
    EXPECT_NE(out.find("AUC n/a"), std::string::npos) << out;
}
