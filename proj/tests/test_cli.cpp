#include "test_util.hpp"

#include "covarnav/harness.hpp"

#include <fstream>
#include <sstream>

using namespace covarnav;
using namespace covarnav::testing;

namespace {

nlohmann::json tiny_config(const std::filesystem::path& out_dir) {
    return {{"dataset", {{"kind", "glyphs"}, {"name", "tiny"}, {"per_class", 6}, {"test_per_class", 3},
                         {"image_size", 8}, {"num_classes", 4}}},
            {"architecture", {{"channels", {4, 6}}}},
            {"forget_class", 1},
            {"train", {{"epochs", 2}, {"batch_size", 8}}},
            {"inversion", {{"samples_per_class", 2}, {"steps", 3}, {"batch_size", 6}}},
            {"unlearning", {{"p", 0.99}, {"epochs", 2}, {"batch_size", 4}}},
            {"baseline", {{"epochs", 1}}},
            {"metrics", {{"relearn_cap", 20}}},
            {"seeds", {0}},
            {"output_dir", out_dir.string()}};
}

struct Cli {
    TempDir dir;
    std::filesystem::path config = dir / "config.json";

    explicit Cli(nlohmann::json cfg = {}) {
        if (cfg.is_null()) cfg = tiny_config(dir / "results");
        std::ofstream(config) << cfg.dump(2);
    }

    struct Result {
        int code;
        std::string out, err;
    };

    Result run(std::vector<std::string> args) const {
        std::vector<const char*> argv = {"covarnav"};
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        return {code, out.str(), err.str()};
    }

    Result run_with_config(const std::string& sub, std::vector<std::string> extra = {}) const {
        std::vector<std::string> args = {sub, "--config", config.string()};
        args.insert(args.end(), extra.begin(), extra.end());
        return run(args);
    }

    std::filesystem::path results() const { return dir / "results" / "tiny"; }
    std::filesystem::path original() const { return results() / "original" / "0" / "checkpoints" / "original.ckpt"; }
};

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

nlohmann::json read_json(const std::filesystem::path& p) { return nlohmann::json::parse(slurp(p)); }

}  // namespace

TEST(Config, FingerprintIsStableUnderKeyOrderAndDefaults) {
    TempDir d;
    const auto j = tiny_config(d / "r");
    const auto a = config_from_json(j);
    const auto b = config_from_json(nlohmann::json::parse(j.dump()));
    EXPECT_EQ(fingerprint(a), fingerprint(b));
    EXPECT_EQ(fingerprint(config_from_json(to_json(a))), fingerprint(a));
    auto changed = j;
    changed["unlearning"]["p"] = 0.9;
    EXPECT_NE(fingerprint(config_from_json(changed)), fingerprint(a));
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
    TempDir d;
    auto j = tiny_config(d / "r");
    j["unlearning"]["pp"] = 1;
    EXPECT_THROW(config_from_json(j), ValidationError);
    j = tiny_config(d / "r");
    j["forget_class"] = 4;
    EXPECT_THROW(config_from_json(j), ValidationError);
    j = tiny_config(d / "r");
    j["unlearning"]["covariance_source"] = "both";
    EXPECT_THROW(config_from_json(j), ValidationError);
}

TEST(Config, ShippedConfigsLoad) {
    for (const auto& e : std::filesystem::directory_iterator(COVARNAV_SOURCE_DIR "/configs"))
        if (e.path().extension() == ".json") {
            const auto j = nlohmann::json::parse(slurp(e.path()));
            if (j.at("dataset").at("kind") == "glyphs") {
                EXPECT_NO_THROW(load_config(e.path())) << e.path();
                continue;
            }
            // External datasets: everything but the data location must check out.
            try {
                load_config(e.path());
            } catch (const ValidationError& err) {
                EXPECT_NE(std::string(err.what()).find("does not exist"), std::string::npos) << err.what();
            }
        }
}

TEST(Cli, InvalidForgetClassExitsWithValidationCode) {
    TempDir d;
    auto j = tiny_config(d / "r");
    j["forget_class"] = 7;
    const Cli cli(j);
    const auto r = cli.run_with_config("train");
    EXPECT_EQ(r.code, kExitValidation);
    EXPECT_NE(r.err.find("forget"), std::string::npos);
}

TEST(Cli, MissingSubcommandOrConfigIsAUsageError) {
    const Cli cli;
    EXPECT_EQ(cli.run({}).code, kExitValidation);
    EXPECT_EQ(cli.run({"train"}).code, kExitValidation);
    EXPECT_EQ(cli.run({"unlearn", "--config", (cli.dir / "nope.json").string()}).code, kExitValidation);
}

TEST(Cli, UnlearnBeforeTrainAsksForTraining) {
    const Cli cli;
    const auto r = cli.run_with_config("unlearn");
    EXPECT_EQ(r.code, kExitValidation);
    EXPECT_NE(r.err.find("train"), std::string::npos);
}

TEST(Cli, TrainIsByteIdenticalAcrossRuns) {
    const Cli cli;
    ASSERT_EQ(cli.run_with_config("train").code, kExitOk);
    const auto first = slurp(cli.original());
    ASSERT_FALSE(first.empty());
    ASSERT_EQ(cli.run_with_config("train").code, kExitOk);
    EXPECT_EQ(slurp(cli.original()), first);
    EXPECT_TRUE(std::filesystem::exists(cli.results() / "original" / "0" / "train_log.json"));
}

class CliPipeline : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        cli_ = new Cli();
        ASSERT_EQ(cli_->run_with_config("train").code, kExitOk);
    }
    static void TearDownTestSuite() {
        delete cli_;
        cli_ = nullptr;
    }
    static Cli* cli_;
};
Cli* CliPipeline::cli_ = nullptr;

TEST_F(CliPipeline, CovarnavUnlearnWritesValidReportAndArtifacts) {
    const auto r = cli_->run_with_config("unlearn", {"--no-retain-access"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const auto dir = cli_->results() / "covarnav" / "0";
    const auto report = read_json(dir / "report.json");
    EXPECT_TRUE(validate_report_json(report).empty());
    EXPECT_EQ(report.at("method"), "covarnav");
    EXPECT_EQ(report.at("details").at("covariance_source"), "D_hat_r");
    EXPECT_EQ(report.at("details").at("retain_access"), false);
    EXPECT_EQ(report.at("config_fingerprint"), fingerprint(load_config(cli_->config)));
    EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "unlearned.ckpt"));
    EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "projection.json"));
}

TEST_F(CliPipeline, RetrainRefusesWithoutRetainAccess) {
    const auto r = cli_->run_with_config("unlearn", {"--method", "retrain", "--no-retain-access"});
    EXPECT_EQ(r.code, kExitValidation);
    EXPECT_NE(r.err.find("refused"), std::string::npos);
    EXPECT_FALSE(std::filesystem::exists(cli_->results() / "retrain"));
}

TEST_F(CliPipeline, BaselineUnlearnAndUnknownMethod) {
    const auto r = cli_->run_with_config("unlearn", {"--method", "random-labels"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_TRUE(validate_report_json(read_json(cli_->results() / "random-labels" / "0" / "report.json")).empty());
    EXPECT_EQ(cli_->run_with_config("unlearn", {"--method", "magic"}).code, kExitValidation);
}

TEST_F(CliPipeline, InvertThenUnlearnWithProxyFile) {
    const auto proxy = cli_->dir / "proxy.json";
    ASSERT_EQ(cli_->run_with_config("invert", {"--out", proxy.string()}).code, kExitOk);
    const auto ds = load_packed(proxy);
    EXPECT_TRUE(ds.synthetic);
    EXPECT_FALSE(ds.classes().count(1));
    const auto r = cli_->run_with_config("unlearn", {"--proxy", proxy.string()});
    EXPECT_EQ(r.code, kExitOk) << r.err;
}

TEST_F(CliPipeline, EvaluateSameCheckpointGivesZeroDeltas) {
    const auto out = cli_->dir / "eval.json";
    const auto ck = cli_->original().string();
    const auto r = cli_->run_with_config("evaluate", {"--before", ck, "--after", ck, "--out", out.string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const auto j = read_json(out);
    EXPECT_TRUE(validate_report_json(j).empty());
    EXPECT_EQ(j["acc"]["before"], j["acc"]["after"]);
}

TEST_F(CliPipeline, EvaluateWithAinAddsRelearnFields) {
    const auto out = cli_->dir / "eval_ain.json";
    const auto ck = cli_->original().string();
    const auto r = cli_->run_with_config("evaluate", {"--before", ck, "--after", ck, "--ain", "--out", out.string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const auto j = read_json(out);
    EXPECT_EQ(j.at("rt_unlearned"), 0);
    EXPECT_TRUE(j.at("rt_scratch").is_number_integer());
    EXPECT_TRUE(j.at("details").contains("relearn"));
}

TEST_F(CliPipeline, AggregateMatchesManualMean) {
    std::vector<std::string> paths;
    double sum = 0;
    for (int s = 0; s < 3; ++s) {
        UnlearningReport r;
        r.method = "covarnav";
        r.seed = s;
        r.after = AccuracyReport{0, 0.5 + 0.1 * s, 0, 0.4 + 0.05 * s};
        sum += r.after->drt;
        const auto p = cli_->dir / ("r" + std::to_string(s) + ".json");
        write_json(p, to_json(r));
        paths.push_back(p.string());
    }
    std::vector<std::string> args = {"evaluate", "--aggregate"};
    args.insert(args.end(), paths.begin(), paths.end());
    const auto r = cli_->run(args);
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const auto j = nlohmann::json::parse(r.out);
    EXPECT_NEAR(j["mean"]["after.drt"].get<double>(), sum / 3, 1e-12);
    EXPECT_EQ(j["runs"], 3);
}

TEST_F(CliPipeline, ExportEmbeddingsOfTheSameCheckpointTwice) {
    const auto out = cli_->dir / "emb" / "train.json";
    const auto ck = cli_->original().string();
    const auto r = cli_->run_with_config("export-embeddings", {"--model", ck, "--model", ck, "--name", "a", "--name",
                                                               "b", "--out", out.string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const auto e = load_embeddings(out);
    ASSERT_EQ(e.vectors.size(), 2u);
    EXPECT_EQ(e.vectors[0], e.vectors[1]);
    EXPECT_EQ(e.model_names, (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(std::count(e.forget_mask.begin(), e.forget_mask.end(), 1), 6);
    // Rows equal the head input recorded by an independent forward pass.
    const auto cfg = load_config(cli_->config);
    const auto data = load_datasets(cfg);
    const auto model = load_snapshot<double>(ck);
    const auto tape = forward_tape(model.state(), data.train.batch_range<double>(0, 3).images, Mode::eval);
    const int d = static_cast<int>(e.vectors[0].cols());
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < d; ++j)
            EXPECT_EQ(e.vectors[0](i, j), static_cast<float>(tape.head_input.data[i * d + j]));
}

TEST_F(CliPipeline, ExportEmbeddingsRejectsMismatchedNames) {
    const auto ck = cli_->original().string();
    EXPECT_EQ(cli_->run_with_config("export-embeddings", {"--model", ck, "--name", "a", "--name", "b"}).code,
              kExitValidation);
}

TEST_F(CliPipeline, AblateWritesOneRowPerCell) {
    const auto out = cli_->dir / "ablation.json";
    const auto r = cli_->run_with_config("ablate", {"--sources", "D_r,D_hat_r", "--objectives", "random",
                                                    "--out", out.string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const auto j = read_json(out);
    EXPECT_EQ(j.at("rows").size(), 3u);
    EXPECT_EQ(j.at("summary").size(), 3u);
    EXPECT_EQ(cli_->run_with_config("ablate", {"--sources", "D_x"}).code, kExitValidation);
}
