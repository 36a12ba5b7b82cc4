#include <gtest/gtest.h>

#include <sys/wait.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "rcd/cli.hpp"
#include "rcd/editkit.hpp"
#include "test_util.hpp"

using namespace rcd;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::map<std::string, std::string> read_manifest(const std::string& path) {
    std::map<std::string, std::string> out;
    std::istringstream in(slurp(path));
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return out;
}

std::vector<int> parse_counts(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
    return out;
}

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

// Pearson chi-square homogeneity test on a 2 x C table; empty columns dropped.
double chi2_p_value(const std::vector<int>& a, const std::vector<int>& b) {
    double na = 0, nb = 0;
    for (int v : a) na += v;
    for (int v : b) nb += v;
    double stat = 0;
    int cols = 0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double col = a[j] + b[j];
        if (col == 0) continue;
        ++cols;
        const double ea = col * na / (na + nb), eb = col * nb / (na + nb);
        stat += (a[j] - ea) * (a[j] - ea) / ea + (b[j] - eb) * (b[j] - eb) / eb;
    }
    if (cols < 2) return 1.0;
    boost::math::chi_squared dist(cols - 1);
    return boost::math::cdf(boost::math::complement(dist, stat));
}

// Worlds and a default-trained model shared by the slow tests.
class CliPipeline : public ::testing::Test {
  protected:
    static void SetUpTestSuite() {
        dir_ = new rcd_test::TempDir();
        ASSERT_EQ(cli({"gen-world", "--out", f("w.bin")}).code, 0);
        ASSERT_EQ(cli({"gen-world", "--out", f("w2.bin"), "--set", "world.seed=1"}).code, 0);
        ASSERT_EQ(cli({"build-index", "--world", f("w.bin"), "--out", f("idx.bin")}).code, 0);
        ASSERT_EQ(cli({"build-index", "--world", f("w2.bin"), "--out", f("idx2.bin")}).code, 0);
        ASSERT_EQ(cli({"train", "--world", f("w.bin"), "--index", f("idx.bin"), "--out", f("gen")}).code, 0);
        ASSERT_EQ(cli({"manip-train", "--world", f("w.bin"), "--index", f("idx.bin"), "--out", f("manip"), "--set",
                       "train.steps=500"})
                      .code,
                  0);
    }
    static void TearDownTestSuite() { delete dir_; }
    static std::string f(const std::string& name) { return dir_->file(name); }

    static rcd_test::TempDir* dir_;
};

rcd_test::TempDir* CliPipeline::dir_ = nullptr;

}  // namespace

TEST(RunConfigTest, DefaultsCoverEveryKey) {
    RunConfig cfg;
    for (const auto& k : config_keys()) EXPECT_EQ(cfg.get(k.name), k.default_value);
    EXPECT_NO_THROW(cfg.train_config());
    EXPECT_EQ(cfg.world_spec().concepts, 4);
    EXPECT_EQ(cfg.index_params().m, 8);
    EXPECT_DOUBLE_EQ(cfg.get_double("sample.cfg"), 8.0);
    EXPECT_EQ(RunConfig::parse(cfg.to_text()).to_text(), cfg.to_text());
}

TEST(RunConfigTest, ParsesSectionsDottedKeysAndComments) {
    auto cfg = RunConfig::parse(
        "# comment\n"
        "[train]\n"
        "steps = 7   # trailing\n"
        "lr=0.01\n"
        "\n"
        "[sample]\n"
        "world.seed = 3\n"
        "cfg = 4\n");
    EXPECT_EQ(cfg.get_int("train.steps"), 7);
    EXPECT_DOUBLE_EQ(cfg.get_double("train.lr"), 0.01);
    EXPECT_EQ(cfg.get_u64("world.seed"), 3u);
    EXPECT_DOUBLE_EQ(cfg.get_double("sample.cfg"), 4.0);
    EXPECT_EQ(cfg.train_config().steps, 7);
}

TEST(RunConfigTest, RejectsUnknownKeysAndBadValues) {
    EXPECT_THROW(RunConfig::parse("train.stpes=3\n"), InvalidArgument);
    EXPECT_THROW(RunConfig::parse("[bogus]\nsteps=3\n"), InvalidArgument);
    EXPECT_THROW(RunConfig::parse("train.steps\n"), InvalidArgument);
    EXPECT_THROW(RunConfig::parse("[train\n"), InvalidArgument);
    EXPECT_THROW(RunConfig::parse("train.steps=1.5\n"), InvalidArgument);
    EXPECT_THROW(RunConfig::parse("train.lr=fast\n"), InvalidArgument);
    EXPECT_THROW(RunConfig::parse("index.opq=maybe\n"), InvalidArgument);
    EXPECT_THROW(RunConfig::parse("model.fusion=mlp\n"), InvalidArgument);
    RunConfig cfg;
    EXPECT_THROW(cfg.set("train.steps=x"), InvalidArgument);
    EXPECT_EQ(cfg.get("train.steps"), "2000");
    EXPECT_THROW(cfg.set("novalue"), InvalidArgument);
    cfg.set("train.batch", "0");
    EXPECT_THROW(cfg.train_config(), InvalidArgument);
    EXPECT_THROW(RunConfig::load("/nonexistent/cfg.txt"), DataError);
}

TEST(GridFiles, TextAndBinaryRoundTrip) {
    rcd_test::TempDir dir;
    auto world = gen_world({});
    std::vector<TokenGrid> grids(world.samples.begin(), world.samples.begin() + 5);
    EXPECT_EQ(grids_from_text(grids_to_text(grids)), grids);
    save_grids(grids, dir.file("g.bin"));
    EXPECT_EQ(load_grids(dir.file("g.bin")), grids);
    {
        std::ofstream t(dir.file("g.txt"));
        t << grids_to_text(grids);
    }
    EXPECT_EQ(load_grids(dir.file("g.txt")), grids);
    EXPECT_EQ(grid_to_text(TokenGrid(1, 3, {0, 9, 10})), "09a\n");
    EXPECT_THROW(grid_to_text(TokenGrid(1, 1, {36})), InvalidArgument);
    EXPECT_THROW(grids_from_text("012\n01\n"), DataError);
    EXPECT_THROW(grids_from_text("0?1\n"), DataError);
    EXPECT_THROW(grids_from_text("0#1\n"), DataError);

    const std::string bytes = slurp(dir.file("g.bin"));
    {
        std::ofstream t(dir.file("cut.bin"), std::ios::binary);
        t << bytes.substr(0, bytes.size() - 1);
    }
    EXPECT_THROW(load_grids(dir.file("cut.bin")), DataError);
    EXPECT_THROW(load_grids(dir.file("none.bin")), DataError);
}

TEST(ScoreFilterTest, ParsesRanges) {
    EXPECT_EQ(parse_filter_range("-0.5, 0.25"), (std::pair{-0.5, 0.25}));
    EXPECT_THROW(parse_filter_range("0.5"), InvalidArgument);
    EXPECT_THROW(parse_filter_range("0.5,0.1"), InvalidArgument);
    EXPECT_THROW(parse_filter_range("a,1"), InvalidArgument);
}

TEST(ScoreFilterTest, QuantilesAndRangesSelectFromThePool) {
    auto exp = Experiment::make(gen_world({}), 90);
    auto index = exp.build_index();
    const Scorer scorer(32, 7);
    for (int c = 0; c < 4; ++c) {
        for (int m = 0; m < 5; ++m) {
            const auto q = exp.queries.embed_query(c, 0.3, derive_seed(40, c, m));
            // Without filtering the result is the plain kNN condition.
            auto plain = filtered_condition(index, q, 10, scorer, {});
            EXPECT_EQ(plain.cond.neighbors, retrieve_condition(index, q, 10).neighbors);

            double prev = -1e9;
            for (int quant = 1; quant <= 5; ++quant) {
                ScoreFilter sf;
                sf.quantile = quant;
                auto r = filtered_condition(index, q, 10, scorer, sf);
                EXPECT_EQ(r.pool_size, index.size());
                EXPECT_EQ(r.ids.size(), 10u);
                EXPECT_GT(r.mean_score, prev) << "quantile " << quant;
                prev = r.mean_score;
                // Survivors are the right fifth of the pool by score.
                std::vector<double> all;
                for (std::size_t i = 0; i < index.size(); ++i) all.push_back(scorer.score(index.raw().vector_at(i)));
                std::sort(all.begin(), all.end());
                const std::size_t lo = all.size() * static_cast<std::size_t>(quant - 1) / 5;
                const std::size_t hi = all.size() * static_cast<std::size_t>(quant) / 5;
                for (auto id : r.ids) {
                    const double s = scorer.score(index.raw().vector_of(id));
                    EXPECT_GE(s, all[lo]);
                    EXPECT_LE(s, all[hi - 1]);
                }
            }

            ScoreFilter range;
            range.range = {0.0, 0.05};
            auto r = filtered_condition(index, q, 10, scorer, range);
            for (auto id : r.ids) {
                const double s = scorer.score(index.raw().vector_of(id));
                EXPECT_GE(s, 0.0);
                EXPECT_LT(s, 0.05);
            }
        }
    }
    ScoreFilter none;
    none.range = {5.0, 6.0};
    try {
        filtered_condition(index, exp.embeddings[0], 10, scorer, none);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("L=5 H=6"), std::string::npos) << e.what();
    }
    auto zero = filtered_condition(index, exp.embeddings[0], 0, scorer, none);
    EXPECT_EQ(zero.cond.k(), 0);
}

TEST(CliUsage, ExitCodes) {
    EXPECT_EQ(cli({}).code, kExitUsage);
    EXPECT_EQ(cli({"frobnicate"}).code, kExitUsage);
    EXPECT_EQ(cli({"gen-world"}).code, kExitUsage);
    auto help = cli({"--help"});
    EXPECT_EQ(help.code, kExitOk);
    for (const auto& k : config_keys()) EXPECT_NE(help.out.find(k.name), std::string::npos) << k.name;
    EXPECT_EQ(cli({"ablate", "--which", "bogus", "--world", "w", "--out", "o"}).code, kExitUsage);
    EXPECT_EQ(cli({"sample", "--model", "m", "--world", "w", "--out", "o", "--quantile", "6"}).code, kExitUsage);

    rcd_test::TempDir dir;
    auto r = cli({"gen-world", "--out", dir.file("w.bin"), "--set", "world.nope=1"});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_NE(r.err.find("world.nope"), std::string::npos);
    EXPECT_EQ(cli({"gen-world", "--out", dir.file("w.bin"), "--config", dir.file("missing.cfg")}).code, kExitData);
    r = cli({"train", "--world", dir.file("nope.bin"), "--out", dir.file("o")});
    EXPECT_EQ(r.code, kExitData);
    EXPECT_NE(r.err.find(dir.file("nope.bin")), std::string::npos);
}

TEST(CliUsage, BinaryReportsExitCodes) {
    rcd_test::TempDir dir;
    const std::string bin = RCD_BINARY;
    auto status = [](const std::string& cmd) { return WEXITSTATUS(std::system((cmd + " >/dev/null 2>&1").c_str())); };
    EXPECT_EQ(status(bin + " gen-world --out " + dir.file("w.bin")), 0);
    EXPECT_EQ(status(bin + " gen-world"), 1);
    EXPECT_EQ(status(bin + " sample --model " + dir.file("none.ckpt") + " --world " + dir.file("w.bin") + " --out " +
                     dir.file("s")),
              2);
    EXPECT_EQ(status(bin + " train --world " + dir.file("w.bin") + " --out " + dir.file("t") +
                     " --set train.lr=1e300 --set train.steps=3"),
              3);
}

TEST(CliCommands, GenWorldIsDeterministicAndLoadable) {
    rcd_test::TempDir dir;
    ASSERT_EQ(cli({"gen-world", "--out", dir.file("a.bin")}).code, 0);
    ASSERT_EQ(cli({"gen-world", "--out", dir.file("b.bin")}).code, 0);
    EXPECT_EQ(slurp(dir.file("a.bin")), slurp(dir.file("b.bin")));
    EXPECT_EQ(load_world(dir.file("a.bin")), gen_world({}));
    {
        std::ofstream c(dir.file("w.cfg"));
        c << "[world]\nconcepts = 3\nper_concept = 20\n";
    }
    ASSERT_EQ(cli({"gen-world", "--config", dir.file("w.cfg"), "--out", dir.file("c.bin")}).code, 0);
    EXPECT_EQ(load_world(dir.file("c.bin")).size(), 60u);
}

TEST(CliCommands, BuildIndexFindsStoredVectorsThemselves) {
    rcd_test::TempDir dir;
    ASSERT_EQ(cli({"gen-world", "--out", dir.file("w.bin")}).code, 0);
    for (int id : {0, 17, 389}) {
        auto r = cli({"build-index", "--world", dir.file("w.bin"), "--out", dir.file("i.bin"), "--query-id",
                      std::to_string(id)});
        ASSERT_EQ(r.code, 0) << r.err;
        EXPECT_NE(r.out.find("query=" + std::to_string(id) + " nearest=" + std::to_string(id) + " "),
                  std::string::npos)
            << r.out;
    }
    auto r = cli({"build-index", "--world", dir.file("w.bin"), "--index", dir.file("i.bin"), "--query-id", "5"});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("query=5 nearest=5 "), std::string::npos);
    // Held-out ids are not stored.
    EXPECT_EQ(cli({"build-index", "--world", dir.file("w.bin"), "--index", dir.file("i.bin"), "--query-id", "95"}).code,
              kExitData);
    auto idx = RetrievalIndex::load(dir.file("i.bin"));
    EXPECT_EQ(idx.size(), 360u);
}

TEST(CliCommands, TrainWithZeroStepsWritesInitialModel) {
    rcd_test::TempDir dir;
    ASSERT_EQ(cli({"gen-world", "--out", dir.file("w.bin")}).code, 0);
    auto r = cli({"train", "--world", dir.file("w.bin"), "--out", dir.file("t"), "--set", "train.steps=0"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(slurp(dir.file("t/train.log")).empty());
    auto model = Denoiser::load(dir.file("t/model.ckpt"));
    auto exp = Experiment::make(gen_world({}), 90);
    TrainConfig cfg;
    cfg.steps = 0;
    EXPECT_TRUE(model == train(exp, exp.build_index(), cfg).model);

    ASSERT_EQ(cli({"train", "--world", dir.file("w.bin"), "--out", dir.file("t"), "--set", "train.steps=3"}).code, 0);
    std::istringstream log(slurp(dir.file("t/train.log")));
    int lines = 0;
    for (std::string line; std::getline(log, line);) {
        long step;
        double a, b, c;
        ASSERT_EQ(std::sscanf(line.c_str(), "%ld %lf %lf %lf", &step, &a, &b, &c), 4) << line;
        EXPECT_EQ(step, ++lines);
    }
    EXPECT_EQ(lines, 3);
}

TEST_F(CliPipeline, SampleManifestAndDeterminism) {
    const std::string before = slurp(f("idx.bin")) + slurp(f("idx.bin.raw"));
    for (const char* out : {"s1", "s2"}) {
        auto r = cli({"sample", "--model", f("gen/model.ckpt"), "--world", f("w.bin"), "--index", f("idx.bin"), "--count",
                      "4", "--out", f(out)});
        ASSERT_EQ(r.code, 0) << r.err;
    }
    EXPECT_EQ(slurp(f("s1/samples.bin")), slurp(f("s2/samples.bin")));
    EXPECT_EQ(slurp(f("idx.bin")) + slurp(f("idx.bin.raw")), before);
    EXPECT_EQ(load_grids(f("s1/samples.bin")), load_grids(f("s1/samples.txt")));
    auto m = read_manifest(f("s1/manifest.txt"));
    EXPECT_EQ(m["cfg"], "8");
    EXPECT_EQ(m["k"], "10");
    EXPECT_EQ(m["index"], f("idx.bin"));
    EXPECT_EQ(m["filter"], "none");
    EXPECT_EQ(m["count"], "4");
    EXPECT_TRUE(m.contains("mean_neighbor_score"));
    EXPECT_EQ(m["config.sample.pool"], "10000");

    auto r = cli({"sample", "--model", f("gen/model.ckpt"), "--world", f("w.bin"), "--count", "1", "--filter", "2,3",
                  "--out", f("s3")});
    EXPECT_EQ(r.code, kExitData);
    EXPECT_NE(r.err.find("L=2 H=3"), std::string::npos) << r.err;
    r = cli({"sample", "--model", f("manip/manip.ckpt"), "--world", f("w.bin"), "--out", f("s4")});
    EXPECT_EQ(r.code, kExitData);
}

TEST_F(CliPipeline, TopQuantileHasHigherNeighborScores) {
    double mean[6] = {};
    for (int q : {1, 5}) {
        const std::string out = f("q" + std::to_string(q));
        auto r = cli({"sample", "--model", f("gen/model.ckpt"), "--world", f("w.bin"), "--index", f("idx.bin"),
                      "--quantile", std::to_string(q), "--count", "4", "--out", out});
        ASSERT_EQ(r.code, 0) << r.err;
        auto m = read_manifest(out + "/manifest.txt");
        EXPECT_EQ(m["quantile"], std::to_string(q));
        mean[q] = std::stod(m["mean_neighbor_score"]);
    }
    EXPECT_GT(mean[5], mean[1]);
}

TEST_F(CliPipeline, SwappingTheIndexShiftsConceptStatistics) {
    std::vector<int> counts[2];
    const char* idx[2] = {"idx.bin", "idx2.bin"};
    for (int i = 0; i < 2; ++i) {
        const std::string out = f(std::string("swap") + std::to_string(i));
        auto r = cli({"sample", "--model", f("gen/model.ckpt"), "--world", f("w.bin"), "--index", f(idx[i]), "--count",
                      "60", "--out", out});
        ASSERT_EQ(r.code, 0) << r.err;
        auto m = read_manifest(out + "/manifest.txt");
        EXPECT_EQ(m["index"], f(idx[i]));
        counts[i] = parse_counts(m["nearest_concept_counts"]);
        ASSERT_EQ(counts[i].size(), 4u);
    }
    const double p = chi2_p_value(counts[0], counts[1]);
    EXPECT_LT(p, 0.01) << "p = " << p;
}

TEST_F(CliPipeline, ManipPreservesOwnConceptAndIsDeterministic) {
    auto exp = Experiment::make(load_world(f("w.bin")), 90);
    for (int c = 0; c < 4; ++c) {
        std::vector<TokenGrid> in;
        for (auto i : exp.heldout) {
            if (exp.world.labels[i] == c) in.push_back(exp.world.samples[i]);
        }
        const std::string input = f("in" + std::to_string(c) + ".txt");
        {
            std::ofstream t(input);
            t << grids_to_text(in);
        }
        const std::string out = f("mo" + std::to_string(c));
        auto r = cli({"manip", "--model", f("manip/manip.ckpt"), "--world", f("w.bin"), "--input", input,
                      "--query-concept", std::to_string(c), "--out", out});
        ASSERT_EQ(r.code, 0) << r.err;
        auto m = read_manifest(out + "/manifest.txt");
        EXPECT_GE(std::stod(m["unchanged_fraction"]), 0.9) << "concept " << c;
        auto edited = load_grids(out + "/edited.bin");
        ASSERT_EQ(edited.size(), in.size());
        const std::string changes = slurp(out + "/changes.txt");
        std::size_t pos = 0;
        for (std::size_t g = 0; g < in.size(); ++g) {
            for (int cell = 0; cell < 64; ++cell) {
                while (changes[pos] == '\n') ++pos;
                EXPECT_EQ(changes[pos] == 'x', edited[g].tokens[static_cast<std::size_t>(cell)] !=
                                                  in[g].tokens[static_cast<std::size_t>(cell)]);
                ++pos;
            }
        }
    }
    for (const char* out : {"md1", "md2"}) {
        ASSERT_EQ(cli({"manip", "--model", f("manip/manip.ckpt"), "--world", f("w.bin"), "--input", f("in0.txt"),
                       "--query-concept", "1", "--seed", "5", "--out", f(out)})
                      .code,
                  0);
    }
    EXPECT_EQ(slurp(f("md1/edited.bin")), slurp(f("md2/edited.bin")));

    auto r = cli({"manip", "--model", f("absent.ckpt"), "--world", f("w.bin"), "--input", f("in0.txt"),
                  "--query-concept", "0", "--out", f("mz")});
    EXPECT_EQ(r.code, kExitData);
    EXPECT_NE(r.err.find(f("absent.ckpt")), std::string::npos) << r.err;
    r = cli({"manip", "--model", f("gen/model.ckpt"), "--world", f("w.bin"), "--input", f("in0.txt"),
             "--query-concept", "0", "--out", f("mz")});
    EXPECT_EQ(r.code, kExitData);
    r = cli({"manip", "--model", f("manip/manip.ckpt"), "--world", f("w.bin"), "--input", f("in0.txt"),
             "--query-concept", "9", "--out", f("mz")});
    EXPECT_EQ(r.code, kExitUsage);
}

TEST_F(CliPipeline, ManipTrainWarmStart) {
    auto r = cli({"manip-train", "--world", f("w.bin"), "--out", f("warm"), "--warm-start", f("gen/model.ckpt"),
                  "--set", "train.steps=0"});
    ASSERT_EQ(r.code, 0) << r.err;
    auto warm = Denoiser::load(f("warm/manip.ckpt"));
    auto gen = Denoiser::load(f("gen/model.ckpt"));
    const auto& a = gen.block("out.w");
    const auto& b = warm.block("out.w");
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(gen.params()[a.offset + i], warm.params()[b.offset + i]);
}

TEST_F(CliPipeline, AblationCsvStructureAndReruns) {
    const std::vector<std::string> fast = {"--set", "train.eval_samples=1", "--set", "train.steps=20"};
    auto run = [&](const std::string& which, const std::string& out, bool with_model) {
        std::vector<std::string> args = {"ablate", "--which", which, "--world", f("w.bin"), "--index", f("idx.bin"),
                                         "--out", f(out)};
        if (with_model) {
            args.push_back("--model");
            args.push_back(f("gen/model.ckpt"));
        }
        args.insert(args.end(), fast.begin(), fast.end());
        return cli(args);
    };
    auto labels = [&](const std::string& out) {
        std::vector<std::string> got;
        std::istringstream in(slurp(f(out)));
        std::string line;
        std::getline(in, line);
        EXPECT_EQ(line, "label,value,accuracy,heldout_vlb,mean_nn_distance,truncated,loss_reduction,samples");
        while (std::getline(in, line)) got.push_back(line.substr(0, line.find(',')));
        return got;
    };

    ASSERT_EQ(run("k", "k1.csv", true).code, 0);
    ASSERT_EQ(run("k", "k2.csv", true).code, 0);
    EXPECT_EQ(slurp(f("k1.csv")), slurp(f("k2.csv")));
    EXPECT_EQ(labels("k1.csv"), (std::vector<std::string>{"K=1", "K=5", "K=10", "K=20", "K=100", "K=1000", "no-kNN"}));

    ASSERT_EQ(run("index-fraction", "f.csv", true).code, 0);
    EXPECT_EQ(labels("f.csv"),
              (std::vector<std::string>{"fraction=0.1", "fraction=0.3", "fraction=0.5", "fraction=0.7"}));

    ASSERT_EQ(run("fusion", "u.csv", false).code, 0);
    EXPECT_EQ(labels("u.csv"), (std::vector<std::string>{"self-attn", "cross-attn-pool", "concat-linear"}));

    EXPECT_EQ(run("k", "x.csv", false).code, kExitUsage);
}
