#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "tiny_config.hpp"
#include "transferlab/scenarios.hpp"

using namespace tl;
namespace fs = std::filesystem;
using tl::testing::tiny_experiment;

namespace {

const ExperimentResult& tiny_all() {
    static const ExperimentResult r = [] {
        auto zoo = ModelZoo::synthetic(tiny_experiment());
        return run_experiment(zoo, Experiment::All);
    }();
    return r;
}

std::string parity_of(const ReportRow& r) { return r.target_family == r.surrogate_family ? "same" : "different"; }

}  // namespace

TEST_CASE("cell designs have the expected sizes") {
    const auto c = tiny_experiment();
    CHECK(sweep_cells(c).size() == 2 * 2 * (2 + 1));  // families x methods x (epsilons + white-box)
    CHECK(pretraining_cells(c).size() == 32);
    CHECK(disparity_cells(c).size() == 24);
    CHECK(small_target_cells(c).size() == 16);
    auto no_wb = c;
    no_wb.whitebox = false;
    CHECK(sweep_cells(no_wb).size() == 8);
}

TEST_CASE("cell ids are unique, stable and depend on every field") {
    const auto c = tiny_experiment();
    std::set<std::string> ids;
    std::vector<ScenarioCell> all;
    for (auto f : {sweep_cells, pretraining_cells, disparity_cells, small_target_cells})
        for (auto& cell : f(c)) all.push_back(cell);
    for (const auto& cell : all) ids.insert(cell.id());
    CHECK(ids.size() == all.size());
    CHECK(sweep_cells(c)[0].id() == sweep_cells(tiny_experiment())[0].id());
    auto other = c;
    other.master_seed = 4;
    CHECK(sweep_cells(other)[0].id() != sweep_cells(c)[0].id());
    auto cell = all[0];
    const auto base = cell.id();
    cell.attack.alpha = 0.02;
    CHECK(cell.id() != base);
    cell = all[0];
    cell.eval_set = "validation";
    CHECK(cell.id() != base);
}

TEST_CASE("surrogates never coincide with their black-box target") {
    const auto c = tiny_experiment();
    for (auto f : {pretraining_cells, disparity_cells, small_target_cells})
        for (const auto& cell : f(c)) CHECK_FALSE(cell.target == cell.surrogate);
    for (const auto& cell : sweep_cells(c)) CHECK((cell.experiment == "whitebox") == (cell.target == cell.surrogate));
}

TEST_CASE("a full tiny run passes its audit") {
    const auto& r = tiny_all();
    INFO(r.audit.describe());
    CHECK(r.audit.ok());
    CHECK(r.audit.cells == 12 + 32 + 24 + 16);
    CHECK(r.audit.invariants.batches == r.audit.cells);
    CHECK(r.audit.calls_during_crafting == 0);
    CHECK(r.audit.whitebox_batches > 0);
}

TEST_CASE("report rows: relative percent and ordering") {
    const auto& rows = tiny_all().rows;
    for (const auto& r : rows) {
        CHECK(r.relative_pct == static_cast<int>(std::lround(100.0 * r.adv_auc / r.clean_auc)));
        CHECK(r.clean_auc >= 0.0);
        CHECK(r.clean_auc <= 1.0);
        CHECK_FALSE(r.seconds.has_value());
    }
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i - 1].cell_id <= rows[i].cell_id);
    CHECK(relative_percent(0.425, 0.85) == 50);
    CHECK(relative_percent(0.5, 0.0) == 0);
}

TEST_CASE("averaged rows equal the mean of their member cells") {
    const auto& rows = tiny_all().rows;
    std::size_t averaged = 0;
    for (const auto& a : rows) {
        if (!a.averaged()) continue;
        ++averaged;
        double clean = 0, adv = 0, ctl = 0, ssim = 0;
        int n = 0;
        for (const auto& r : rows) {
            if (r.averaged() || r.experiment != a.experiment || r.target_init != a.target_init ||
                r.target_set != a.target_set || r.surrogate_init != a.surrogate_init ||
                r.surrogate_set != a.surrogate_set || r.epsilon != a.epsilon || parity_of(r) != a.surrogate_family)
                continue;
            if (a.method != "mean" && r.method != a.method) continue;
            clean += r.clean_auc;
            adv += r.adv_auc;
            ctl += r.control_auc;
            ssim += r.mean_ssim;
            ++n;
        }
        REQUIRE(n > 0);
        CHECK(std::abs(a.clean_auc - clean / n) <= 1e-12);
        CHECK(std::abs(a.adv_auc - adv / n) <= 1e-12);
        CHECK(std::abs(a.control_auc - ctl / n) <= 1e-12);
        CHECK(std::abs(a.mean_ssim - ssim / n) <= 1e-12);
        CHECK(n == (a.method == "mean" ? 4 : 2));  // two families (or two cross pairs) per method
    }
    CHECK(averaged > 0);
}

TEST_CASE("fgsm rows carry alpha = eps and a single iteration") {
    for (const auto& r : tiny_all().rows) {
        if (r.method == "fgsm") {
            REQUIRE(r.alpha.has_value());
            CHECK(*r.alpha == r.epsilon);
            CHECK(*r.iters == 1);
        } else if (r.method == "pgd") {
            CHECK(*r.iters == 2);
        } else {
            CHECK_FALSE(r.alpha.has_value());
        }
    }
}

TEST_CASE("report text round trip and metadata") {
    const auto c = tiny_experiment();
    const auto& rows = tiny_all().rows;
    const auto meta = report_meta(c);
    const auto text = format_report(rows, meta);
    ReportMeta back_meta;
    const auto back = parse_report(text, &back_meta);
    CHECK(back == rows);
    CHECK(back_meta.entries == meta.entries);
    std::map<std::string, std::string> m(meta.entries.begin(), meta.entries.end());
    CHECK(m.at("master_seed") == "3");
    CHECK(m.at("config_hash") == config_hash(c));
    for (const char* key : {"range_clip", "sign_of_zero", "pgd_start", "control_noise", "relative_pct", "replicate_rule"})
        CHECK(m.count(key));
    const auto header = text.substr(text.find('\n', text.rfind("# ")) + 1);
    CHECK(header.rfind("cell_id,experiment,", 0) == 0);

    const auto dir = fs::temp_directory_path() / "transferlab-test-report";
    fs::remove_all(dir);
    write_report(rows, meta, dir / "r.csv");
    CHECK(read_report(dir / "r.csv") == rows);
    render_figures(rows, dir / "fig");
    CHECK(fs::exists(dir / "fig" / "epsilon_ssim.tsv"));
    CHECK(fs::exists(dir / "fig" / "epsilon_auc.tsv"));
    fs::remove_all(dir);

    CHECK_THROWS(parse_report("cell_id,experiment\nx,y\n"));
}

TEST_CASE("format_number is shortest round-trip") {
    for (double v : {0.0, 0.1, 1.0 / 3.0, 0.8455, 1e-300, -2.5}) CHECK(std::stod(format_number(v)) == v);
    CHECK(format_number(0.02) == "0.02");
    CHECK(format_number(0.0) == "0");
}

TEST_CASE("runs are reproducible, independent of the job count") {
    auto c = tiny_experiment();
    c.families = {Family::ArchB};
    c.methods = {Method::PGD};
    auto z1 = ModelZoo::synthetic(c);
    const auto a = run_experiment(z1, Experiment::Disparity);
    c.jobs = 3;
    auto z2 = ModelZoo::synthetic(c);
    const auto b = run_experiment(z2, Experiment::Disparity);
    CHECK(format_report(a.rows, report_meta(c)) == format_report(b.rows, report_meta(c)));
}

TEST_CASE("config json round trip, strict keys, hash") {
    auto c = tiny_experiment();
    c.train.augment = kAugmentHFlip | kAugmentRot90;
    c.methods = {Method::PGD};
    const auto j = to_json(c);
    const auto back = experiment_config_from_json(j);
    CHECK(to_json(back) == j);
    CHECK(config_hash(back) == config_hash(c));

    auto jobs = c;
    jobs.jobs = 8;
    CHECK(config_hash(jobs) == config_hash(c));
    auto eps = c;
    eps.epsilon = 0.03;
    CHECK(config_hash(eps) != config_hash(c));

    auto bad = j;
    bad["train"]["learning_rate"] = 0.1;
    try {
        experiment_config_from_json(bad);
        FAIL("expected an error");
    } catch (const std::exception& e) {
        CHECK(std::string(e.what()).find("train.learning_rate") != std::string::npos);
    }
    auto wrong_type = j;
    wrong_type["epsilon"] = "big";
    CHECK_THROWS(experiment_config_from_json(wrong_type));
    auto invalid = j;
    invalid["epsilons"] = nlohmann::json::array();
    CHECK_THROWS(experiment_config_from_json(invalid).validate());
}

TEST_CASE("zoo checkpoints are reused and auto-train can be disabled") {
    const auto dir = fs::temp_directory_path() / "transferlab-test-zoo";
    fs::remove_all(dir);
    const auto c = tiny_experiment(9);
    const ModelRef ref{Family::ArchA, InitMode::Pretrained, "d2_half", 1};
    Model trained = [&] {
        auto zoo = ModelZoo::synthetic(c);
        zoo.set_checkpoint_dir(dir);
        zoo.require({ref});
        CHECK(zoo.model(ref).provenance().training_set == "d2_half");
        CHECK(zoo.model(ref).provenance().init == InitMode::Pretrained);
        return zoo.model(ref);
    }();
    CHECK(fs::exists(dir / "A-pretrained-d2_half-1.tlck"));
    CHECK(fs::exists(dir / "A-source.tlck"));

    auto zoo = ModelZoo::synthetic(c);
    zoo.set_checkpoint_dir(dir);
    zoo.set_auto_train(false);
    zoo.require({ref});
    CHECK(zoo.model(ref) == trained);
    CHECK_THROWS_AS(zoo.require({{Family::ArchB, InitMode::Random, "d1", 1}}), ScenarioError);
    CHECK_THROWS_AS(zoo.model({Family::ArchB, InitMode::Random, "d1", 1}), ScenarioError);
    fs::remove_all(dir);
}

TEST_CASE("model seeds are distinct per model and reproducible") {
    const auto zoo = ModelZoo::synthetic(tiny_experiment());
    const ModelRef a{Family::ArchA, InitMode::Random, "d1", 1};
    const ModelRef b{Family::ArchA, InitMode::Random, "d1", 2};
    CHECK(zoo.init_seed(a) != zoo.init_seed(b));
    CHECK(zoo.training_seed(a) != zoo.training_seed(b));
    CHECK(zoo.init_seed(a) == ModelZoo::synthetic(tiny_experiment()).init_seed(a));
    CHECK(a.id() == "A/random/d1/1");
    CHECK(b.file_stem() == "A-random-d1-2");
}

TEST_CASE("experiment names") {
    CHECK(parse_experiment("small-target") == Experiment::SmallTarget);
    CHECK(std::string(to_string(Experiment::Sweep)) == "sweep");
    CHECK_THROWS(parse_experiment("everything"));
}
