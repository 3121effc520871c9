#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "calcscore/cli.hpp"
#include "test_support.hpp"

using namespace calcscore;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = 0;
    std::string out, err;
};

Run invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "calcscore");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Run r;
    r.code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void write(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

// Small phantoms and tiny networks so a full train fits in a unit test.
const char* kTinyConfig = R"({
  // unit-test scale
  "seed": 3,
  "stage1": {"rf_target": 11, "width": 2, "fusion_width": 4, "patch_size": 11, "batch_size": 8,
             "micro_batch": 4, "epochs": 1, "steps_per_epoch": 4, "validation_samples": 8},
  "stage2": {"widths": [2, 2, 2], "dense_width": 4, "batch_size": 8, "epochs": 1, "steps_per_epoch": 2,
             "validation_samples": 8},
  "phantom": {"count": 4, "dims": [12, 96, 96]}
})";

const char* kSoftTable = "90 17 1 0\n3 59 4 0\n0 2 99 2\n0 0 1 32\n";

}  // namespace

TEST_CASE("kappa command", "[cli]") {
    auto dir = calcscore::testing::scratch_dir("cli_kappa");
    write(dir / "m.txt", kSoftTable);
    auto r = invoke({"kappa", (dir / "m.txt").string(), "--out", dir.string()});
    CHECK(r.code == 0);
    CHECK(r.out == "0.91\n");
    auto manifest = Json::parse(slurp(dir / "kappa.manifest.json"));
    CHECK(manifest["command"] == "kappa");
    CHECK(manifest["inputs"].size() == 1);

    write(dir / "bad.txt", "1 2 3\n");
    auto bad = invoke({"kappa", (dir / "bad.txt").string(), "--out", dir.string()});
    CHECK(bad.code == cli::kUsage);
    CHECK(bad.err.rfind("error: schema_violation: ", 0) == 0);
    CHECK(std::count(bad.err.begin(), bad.err.end(), '\n') == 1);
    CHECK(invoke({"kappa", (dir / "none.txt").string(), "--out", dir.string()}).code == cli::kMissingInput);
}

TEST_CASE("rf command", "[cli]") {
    auto dir = calcscore::testing::scratch_dir("cli_rf");
    auto r = invoke({"rf", "--out", dir.string()});
    CHECK(r.code == 0);
    CHECK(r.out.find("cnn1 receptive_field 131\n") != std::string::npos);
    CHECK(r.out.find("cnn2 patch 65x65") != std::string::npos);
    for (int rf : {35, 67, 259}) {
        auto v = invoke({"rf", "--rf-target", std::to_string(rf), "--out", dir.string()});
        CHECK(v.code == 0);
        CHECK(v.out.find("cnn1 receptive_field " + std::to_string(rf) + "\n") != std::string::npos);
    }
    CHECK(invoke({"rf", "--rf-target", "100", "--out", dir.string()}).code == cli::kUsage);
    CHECK(fs::exists(dir / "rf.manifest.json"));
}

TEST_CASE("usage and help", "[cli]") {
    CHECK(invoke({}).code == cli::kUsage);
    CHECK(invoke({"bogus"}).code == cli::kUsage);
    CHECK(invoke({"rf", "--precision", "f16"}).code == cli::kUsage);
    CHECK(invoke({"rf", "--threads", "0"}).code == cli::kUsage);
    CHECK(invoke({"kappa", "x", "--undocumented"}).code == cli::kUsage);

    auto top = invoke({"--help"});
    CHECK(top.code == 0);
    for (const char* c : {"phantom", "train", "score", "eval", "rf", "kappa", "CALCSCORE_THREADS"})
        CHECK(top.out.find(c) != std::string::npos);

    const std::vector<std::string> common = {"--config", "--seed", "--threads", "--precision", "--help"};
    const std::map<std::string, std::vector<std::string>> extra = {
        {"phantom", {"--out"}},           {"train", {"--out", "corpus"}},
        {"score", {"--out", "--weights", "volumes"}}, {"eval", {"--out", "dirs"}},
        {"rf", {"--out", "--rf-target"}}, {"kappa", {"--out", "matrix"}}};
    for (const auto& [cmd, flags] : extra) {
        auto h = invoke({cmd, "--help"});
        CHECK(h.code == 0);
        for (const auto& f : common) CHECK(h.out.find(f) != std::string::npos);
        for (const auto& f : flags) CHECK(h.out.find(f) != std::string::npos);
        for (const char* code : {"0  success", "2  usage", "3  missing input", "4  weight fingerprint", "5  malformed", "6  domain"})
            CHECK(h.out.find(code) != std::string::npos);
        // Every long flag printed is one we document.
        std::istringstream is(h.out);
        std::string tok;
        while (is >> tok) {
            if (tok.rfind("--", 0) != 0 || tok.size() < 3) continue;
            tok = tok.substr(0, tok.find_first_of(",=["));
            const bool known = std::find(common.begin(), common.end(), tok) != common.end() ||
                               std::find(flags.begin(), flags.end(), tok) != flags.end() || tok == "--version";
            CHECK(known);
        }
    }
    CHECK(invoke({"--version"}).out == std::string(kVersion) + "\n");
}

TEST_CASE("config validation", "[cli]") {
    auto dir = calcscore::testing::scratch_dir("cli_config");
    write(dir / "unknown.json", R"({"stage1": {"widht": 3}})");
    auto r = invoke({"rf", "--config", (dir / "unknown.json").string(), "--out", dir.string()});
    CHECK(r.code == cli::kUsage);
    CHECK(r.err.find("stage1.widht") != std::string::npos);
    write(dir / "type.json", R"({"seed": "x"})");
    CHECK(invoke({"rf", "--config", (dir / "type.json").string(), "--out", dir.string()}).code == cli::kUsage);
    write(dir / "syntax.json", "{");
    CHECK(invoke({"rf", "--config", (dir / "syntax.json").string(), "--out", dir.string()}).code == cli::kUsage);
    CHECK(invoke({"rf", "--config", (dir / "missing.json").string()}).code == cli::kMissingInput);

    // Defaults survive a round trip through the serialized form.
    RunConfig rc;
    auto back = run_config_from_json(to_json(rc));
    CHECK(to_json(back) == to_json(rc));
    CHECK(back.pipeline.stage1.adam.learning_rate == 5e-4);
    CHECK(back.pipeline.grid.threshold_hu == 130);
}

TEST_CASE("phantom, train, score and eval", "[cli][train]") {
    auto dir = calcscore::testing::scratch_dir("cli_e2e");
    write(dir / "tiny.json", kTinyConfig);
    const std::string cfg = (dir / "tiny.json").string();

    auto ph = invoke({"phantom", "--config", cfg, "--out", (dir / "corpus").string()});
    REQUIRE(ph.code == 0);
    CHECK(std::count(ph.out.begin(), ph.out.end(), '\n') == 4);
    auto corpus = read_corpus(dir / "corpus");
    CHECK(corpus.records.size() == 4);
    auto manifest = Json::parse(slurp(dir / "corpus" / "phantom.manifest.json"));
    CHECK(manifest["outputs"].size() == 9);
    CHECK(manifest["seed"] == 3);

    SECTION("training twice gives byte-identical weights") {
        auto a = invoke({"train", (dir / "corpus").string(), "--config", cfg, "--out", (dir / "w1").string()});
        REQUIRE(a.code == 0);
        auto b = invoke({"train", (dir / "corpus").string(), "--config", cfg, "--out", (dir / "w2").string(), "--threads", "2"});
        REQUIRE(b.code == 0);
        for (const char* f : {cli::kCnn1File, cli::kCnn2File}) CHECK(slurp(dir / "w1" / f) == slurp(dir / "w2" / f));
        auto m = Json::parse(slurp(dir / "w1" / "train.manifest.json"));
        CHECK(m["weights"].size() == 2);
        CHECK(m["inputs"].size() == 10);
        auto log = Json::parse(slurp(dir / "w1" / "training_log.json"));
        CHECK(log["epochs"].size() == 2);

        SECTION("score and eval") {
            const std::string weights = (dir / "w1").string();
            std::vector<std::string> args = {"score", "--weights", weights, "--config", cfg, "--out", (dir / "pred").string()};
            for (const auto& r : corpus.records) args.push_back((dir / "corpus" / r.ct_file).string());
            auto s = invoke(args);
            REQUIRE(s.code == 0);
            for (const auto& r : corpus.records) CHECK(fs::exists(dir / "pred" / (r.entry.subject + "_report.json")));
            auto e = invoke({"eval", (dir / "pred").string(), (dir / "corpus").string(), "--out", (dir / "eval").string()});
            REQUIRE(e.code == 0);
            auto stats = Json::parse(slurp(dir / "eval" / "eval.json"));
            CHECK(stats["scans"] == 4);
            CHECK(stats["risk_confusion"].size() == 4);
            CHECK(e.out.find("risk_weighted_kappa") != std::string::npos);

            // Scoring the same input twice gives identical outputs, also in f64.
            auto again = invoke({"score", "--weights", weights, "--out", (dir / "pred2").string(),
                              (dir / "corpus" / corpus.records[0].ct_file).string()});
            REQUIRE(again.code == 0);
            const std::string id = corpus.records[0].entry.subject;
            CHECK(slurp(dir / "pred" / (id + "_labels.raw")) == slurp(dir / "pred2" / (id + "_labels.raw")));
            CHECK(invoke({"score", "--precision", "f64", "--weights", weights, "--out", (dir / "pred3").string(),
                       (dir / "corpus" / corpus.records[0].ct_file).string()})
                      .code == 0);
        }
        SECTION("architecture mismatch is a fingerprint error") {
            write(dir / "other.json", R"({"stage1": {"rf_target": 19, "patch_size": 19, "width": 2, "fusion_width": 4}})");
            auto s = invoke({"score", "--weights", (dir / "w1").string(), "--config", (dir / "other.json").string(), "--out",
                          (dir / "pred").string(), (dir / "corpus" / corpus.records[0].ct_file).string()});
            CHECK(s.code == cli::kFingerprintMismatch);
            CHECK(s.err.rfind("error: fingerprint_mismatch: ", 0) == 0);
        }
    }
}

TEST_CASE("score of an all-air volume", "[cli]") {
    auto dir = calcscore::testing::scratch_dir("cli_air");
    PipelineConfig pc;
    pc.stage1.rf_target = 11;
    pc.stage1.width = 2;
    pc.stage1.fusion_width = 4;
    pc.stage1.patch_size = 11;
    pc.stage2.widths = {2, 2, 2};
    pc.stage2.dense_width = 4;
    fs::create_directories(dir / "w");
    nn::save_weights(dir / "w" / cli::kCnn1File, stage1::Cnn1<float>(pc.cnn1_spec(), 1).export_weights(0));
    nn::save_weights(dir / "w" / cli::kCnn2File, stage2::Cnn2<float>(pc.cnn2_spec(), 2).export_weights(0));
    CtVolume air({10, 40, 40}, {1.5, 0.66, 0.66}, {}, 3.0, -1000.f);
    save_volume(dir / "air_ct.hdr", air);

    auto r = invoke({"score", "--weights", (dir / "w").string(), "--out", (dir / "out").string(), (dir / "air_ct.hdr").string()});
    REQUIRE(r.code == 0);
    auto rep = score_report_from_json(Json::parse(slurp(dir / "out" / "air_report.json")));
    CHECK(rep.scan_id == "air");
    for (int c = 1; c < kNumClasses; ++c) {
        CHECK(rep.per_class[static_cast<std::size_t>(c)].volume_mm3 == 0.0);
        CHECK(rep.per_class[static_cast<std::size_t>(c)].agatston == 0.0);
    }
    CHECK(rep.risk == RiskCategory::I);
    CHECK(rep.cnn1_fingerprint.size() > 0);
    auto labels = load_labels(dir / "out" / "air_labels.hdr");
    CHECK(labels.same_grid(air));

    CHECK(invoke({"score", "--weights", (dir / "nowhere").string(), "--out", (dir / "out").string(),
               (dir / "air_ct.hdr").string()})
              .code == cli::kMissingInput);
    write(dir / "broken_ct.hdr", "calcscore volume\nnonsense\n");
    CHECK(invoke({"score", "--weights", (dir / "w").string(), "--out", (dir / "out").string(), (dir / "broken_ct.hdr").string()})
              .code == cli::kFormat);
}

TEST_CASE("process exit codes", "[cli]") {
    const std::string exe = CALCSCORE_CLI_PATH;
    if (!fs::exists(exe)) SKIP("command-line binary not built");
    auto dir = calcscore::testing::scratch_dir("cli_process");
    write(dir / "m.txt", kSoftTable);
    auto status = [](const std::string& cmd) {
        const int s = std::system((cmd + " > /dev/null 2>&1").c_str());
        return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
    };
    CHECK(status(exe + " kappa " + (dir / "m.txt").string() + " --out " + dir.string()) == 0);
    CHECK(status(exe + " kappa " + (dir / "missing.txt").string()) == 3);
    CHECK(status(exe + " frobnicate") == 2);
}
