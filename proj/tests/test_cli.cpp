#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tiny_config.hpp"
#include "transferlab/cli.hpp"

using namespace tl;
namespace fs = std::filesystem;

namespace {

struct Invocation {
    int code = 0;
    std::string out, err;
};

Invocation run_cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    Invocation r;
    r.code = cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

fs::path fresh_dir(const std::string& tag) {
    auto d = fs::temp_directory_path() / ("transferlab-cli-" + tag);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

// Writes a tiny experiment config with its output directory.
fs::path tiny_config_file(const fs::path& dir, std::uint64_t seed = 3) {
    auto j = to_json(testing::tiny_experiment(seed));
    j["output_dir"] = (dir / "out").string();
    std::ofstream(dir / "config.json") << j.dump(2);
    return dir / "config.json";
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

}  // namespace

TEST_CASE("help lists every flag with its default") {
    const auto r = run_cli({"--help-all"});
    CHECK(r.code == 0);
    for (const char* flag : {"--config", "--seed", "--out", "--jobs", "--data", "--samples", "--max-epochs", "--timing",
                             "--family", "--init", "--set", "--instance", "--checkpoint", "--target", "--method",
                             "--epsilon", "--alpha", "--iters", "--dump", "--input", "--figures"})
        CHECK_MESSAGE(r.out.find(flag) != std::string::npos, flag);
    for (const char* def : {"[1]", "[8000]", "[0.02]", "[0.01]", "[20]", "[fgsm]", "[transferlab-out]", "[A]", "[random]",
                            "[d1]", "[test]"})
        CHECK_MESSAGE(r.out.find(def) != std::string::npos, def);
    for (const char* sub : {"gen-data", "train", "pretrain", "attack", "eval", "experiment", "report"})
        CHECK(r.out.find(sub) != std::string::npos);
}

TEST_CASE("usage errors exit with code 1") {
    CHECK(run_cli({}).code == 1);
    CHECK(run_cli({"frobnicate"}).code == 1);
    CHECK(run_cli({"experiment", "everything"}).code == 1);
    CHECK(run_cli({"train", "--family", "Z"}).code == 1);
    CHECK(run_cli({"attack"}).code == 1);  // --checkpoint is required
    const auto missing = run_cli({"experiment", "sweep", "-c", "/definitely/not/here.json"});
    CHECK(missing.code == 1);
    CHECK(missing.err.find("/definitely/not/here.json") != std::string::npos);
    const auto ckpt = run_cli({"eval", "--checkpoint", "/no/such.tlck"});
    CHECK(ckpt.code == 1);
    CHECK(ckpt.err.find("/no/such.tlck") != std::string::npos);
}

TEST_CASE("bad config contents are reported with the offending key") {
    const auto dir = fresh_dir("badcfg");
    std::ofstream(dir / "c.json") << R"({"train": {"epochs": 3}})";
    const auto r = run_cli({"experiment", "sweep", "-c", (dir / "c.json").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("train.epochs") != std::string::npos);
    std::ofstream(dir / "c.json") << "{ not json";
    CHECK(run_cli({"experiment", "sweep", "-c", (dir / "c.json").string()}).code == 1);
    fs::remove_all(dir);
}

TEST_CASE("seed precedence: default, environment, file, flag") {
    const auto dir = fresh_dir("seed");
    CHECK(cli::load_run_config(std::nullopt, nullptr).experiment.master_seed == 1);
    CHECK(cli::load_run_config(std::nullopt, "7").experiment.master_seed == 7);
    CHECK_THROWS_AS(cli::load_run_config(std::nullopt, "seven"), cli::ConfigError);
    std::ofstream(dir / "c.json") << R"({"master_seed": 9})";
    CHECK(cli::load_run_config(dir / "c.json", "7").experiment.master_seed == 9);
    std::ofstream(dir / "d.json") << R"({"epsilon": 0.03})";
    CHECK(cli::load_run_config(dir / "d.json", "7").experiment.master_seed == 7);

    const auto cfg = tiny_config_file(dir, 9);
    const auto r = run_cli({"gen-data", "-c", cfg.string(), "--seed", "11"});
    REQUIRE(r.code == 0);
    const auto m = read_json(dir / "out" / "manifest.json");
    CHECK(m.at("effective_config").at("master_seed") == 11);
    CHECK(m.at("command") == "gen-data");
    CHECK(fs::exists(dir / "out" / "data" / "target.json"));
    CHECK(fs::exists(dir / "out" / "data" / "target.raw"));
    fs::remove_all(dir);
}

TEST_CASE("train, eval and attack on a small checkpoint") {
    const auto dir = fresh_dir("attack");
    const auto cfg = tiny_config_file(dir).string();
    REQUIRE(run_cli({"train", "-c", cfg, "--family", "B", "--set", "d2"}).code == 0);
    REQUIRE(run_cli({"train", "-c", cfg, "--family", "A", "--init", "pretrained"}).code == 0);
    const auto models = dir / "out" / "models";
    CHECK(fs::exists(models / "B-random-d2-1.tlck"));
    CHECK(fs::exists(models / "B-random-d2-1.history.csv"));
    CHECK(fs::exists(models / "A-pretrained-d1-1.tlck"));
    CHECK(fs::exists(models / "A-source.tlck"));

    const auto ev = run_cli({"eval", "-c", cfg, "--checkpoint", (models / "B-random-d2-1.tlck").string()});
    REQUIRE(ev.code == 0);
    const auto result = read_json(dir / "out" / "eval.json");
    CHECK(result.at("auc").get<double>() >= 0.0);
    CHECK(result.at("set") == "test");

    for (const char* method : {"fgsm", "pgd"}) {
        const auto r = run_cli({"attack", "-c", cfg, "--checkpoint", (models / "B-random-d2-1.tlck").string(), "--target",
                                (models / "A-pretrained-d1-1.tlck").string(), "--method", method, "--epsilon", "0.03",
                                "--iters", "3", "--dump", "1"});
        INFO(r.err);
        CHECK(r.code == 0);
        const auto m = read_json(dir / "out" / "manifest.json");
        CHECK(m.at("invariants_ok") == true);
        CHECK(m.at("target_calls") == 3);
        CHECK(m.at("target_calls_during_crafting") == 0);
        const auto rows = read_report(dir / "out" / "attack.csv");
        REQUIRE(rows.size() == 1);
        CHECK(rows[0].method == method);
        CHECK(rows[0].epsilon == 0.03);
        CHECK(rows[0].target_family == "A");
        CHECK(rows[0].surrogate_set == "d2");
        CHECK(fs::exists(dir / "out" / "pgm" / "img0_adversarial.pgm"));
    }
    fs::remove_all(dir);
}

TEST_CASE("experiment sweep is byte-identical across runs and reports are readable") {
    const auto dir = fresh_dir("sweep");
    const auto cfg = tiny_config_file(dir).string();
    const auto a = run_cli({"experiment", "sweep", "-c", cfg, "-o", (dir / "a").string()});
    REQUIRE(a.code == 0);
    const auto b = run_cli({"experiment", "sweep", "-c", cfg, "-o", (dir / "b").string(), "-j", "2"});
    REQUIRE(b.code == 0);
    CHECK(slurp(dir / "a" / "sweep.csv") == slurp(dir / "b" / "sweep.csv"));
    CHECK(fs::exists(dir / "a" / "figures" / "epsilon_ssim.tsv"));
    CHECK(fs::exists(dir / "a" / "models" / "A-random-d1-2.tlck"));
    CHECK(read_json(dir / "a" / "manifest.json").at("audit").at("ok") == true);

    const auto rep = run_cli({"report", "--input", (dir / "a" / "sweep.csv").string(), "--figures", (dir / "fig").string()});
    CHECK(rep.code == 0);
    CHECK(rep.out.find("sweep") != std::string::npos);
    CHECK(fs::exists(dir / "fig" / "epsilon_auc.tsv"));

    // reuses the trained checkpoints
    const auto again = run_cli({"experiment", "sweep", "-c", cfg, "-o", (dir / "a").string()});
    CHECK(again.code == 0);
    CHECK(slurp(dir / "a" / "sweep.csv") == slurp(dir / "b" / "sweep.csv"));
    fs::remove_all(dir);
}

TEST_CASE("external data drives an experiment") {
    const auto dir = fresh_dir("external");
    const auto cfg = tiny_config_file(dir).string();
    REQUIRE(run_cli({"gen-data", "-c", cfg}).code == 0);
    const auto r = run_cli({"experiment", "disparity", "-c", cfg, "--data", (dir / "out" / "data" / "target.json").string(),
                            "-o", (dir / "ext").string()});
    INFO(r.err);
    CHECK(r.code == 0);
    const auto direct = run_cli({"experiment", "disparity", "-c", cfg, "-o", (dir / "gen").string()});
    CHECK(direct.code == 0);
    const auto x = read_report(dir / "ext" / "disparity.csv");
    const auto y = read_report(dir / "gen" / "disparity.csv");
    REQUIRE(x.size() == y.size());
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x[i].clean_auc == doctest::Approx(y[i].clean_auc).epsilon(1e-3));
    fs::remove_all(dir);
}
