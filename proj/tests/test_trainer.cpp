#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "transferlab/trainer.hpp"

using namespace tl;
namespace fs = std::filesystem;

namespace {

ArchSpec tiny(Family f, std::uint32_t arity = 1) {
    ArchSpec s = ArchSpec::defaults(f, arity);
    s.stem = 4;
    s.width_knob = 2;
    s.blocks = 1;
    s.layers = 1;
    return s;
}

const Dataset& small_data() {
    static const Dataset d = generate_target_task(400, 17);
    return d;
}

const Partition& small_partition() {
    static const Partition p = split(small_data(), {}, 3);
    return p;
}

TrainConfig quick(std::size_t epochs = 2) {
    TrainConfig c;
    c.max_epochs = epochs;
    c.seed = 5;
    return c;
}

}  // namespace

TEST_CASE("balanced batches alternate classes and cover the epoch") {
    const auto& d = small_data();
    const auto& train = small_partition().d1.train;
    TrainConfig c;
    Rng rng(1);
    const auto batches = epoch_batches(d, train, c, rng);
    std::size_t total = 0;
    std::set<std::size_t> seen;
    const std::set<std::size_t> allowed(train.begin(), train.end());
    for (const auto& b : batches) {
        CHECK(b.size() >= 2);
        std::size_t pos = 0;
        for (auto i : b) {
            CHECK(allowed.count(i));
            pos += d.labels[i] == 1.0f;
            seen.insert(i);
        }
        CHECK(pos > 0);
        CHECK(pos < b.size());
        CHECK(std::abs(2.0 * static_cast<double>(pos) - static_cast<double>(b.size())) <= 1.0);
        total += b.size();
    }
    CHECK(total == train.size());
    CHECK(seen.size() + 16 >= train.size());  // the majority class may leave a few out
}

TEST_CASE("unbalanced batches are a permutation of the training set") {
    const auto& d = small_data();
    const auto& train = small_partition().d2.train;
    TrainConfig c;
    c.class_balancing = false;
    c.batch_size = 7;
    Rng rng(2);
    std::vector<std::size_t> flat;
    for (const auto& b : epoch_batches(d, train, c, rng)) flat.insert(flat.end(), b.begin(), b.end());
    std::sort(flat.begin(), flat.end());
    auto want = train;
    std::sort(want.begin(), want.end());
    CHECK(flat == want);
}

TEST_CASE("trailing single-sample batch is merged") {
    const auto& d = small_data();
    std::vector<std::size_t> train;
    for (std::size_t i = 0; i < 33; ++i) train.push_back(i);
    TrainConfig c;
    c.class_balancing = false;
    Rng rng(3);
    const auto batches = epoch_batches(d, train, c, rng);
    REQUIRE(batches.size() == 1);
    CHECK(batches[0].size() == 33);
}

TEST_CASE("config validation") {
    TrainConfig c;
    c.lr = 0.0;
    CHECK_THROWS_AS(c.validate(), TrainingError);
    c = {};
    c.decay_factor = 1.0;
    CHECK_THROWS_AS(c.validate(), TrainingError);
    c = {};
    c.augment = 64;
    CHECK_THROWS_AS(c.validate(), TrainingError);
    c = {};
    c.max_epochs = 0;
    CHECK_THROWS_AS(c.validate(), TrainingError);
}

TEST_CASE("training is deterministic and records its history") {
    const auto m = build(tiny(Family::ArchA), 9);
    const auto a = train(m, small_data(), small_partition().d1, quick(), "d1");
    const auto b = train(m, small_data(), small_partition().d1, quick(), "d1");
    CHECK(a.model == b.model);
    REQUIRE(a.history.size() == 2);
    CHECK(a.history[0].epoch == 1);
    CHECK(a.history[0].lr == doctest::Approx(1e-3));
    CHECK(a.best_epoch >= 1);
    CHECK(a.model.provenance().training_set == "d1");
    CHECK(a.model.provenance().training_seed == 5);
    CHECK_FALSE(a.model == m);

    auto other = quick();
    other.seed = 6;
    CHECK_FALSE(train(m, small_data(), small_partition().d1, other, "d1").model == a.model);
}

TEST_CASE("training lowers the training loss") {
    const auto m = build(tiny(Family::ArchB), 2);
    auto c = quick(6);
    c.lr = 3e-3;
    const auto r = train(m, small_data(), small_partition().d1, c, "d1");
    CHECK(r.history.back().train_loss < r.history.front().train_loss);
}

TEST_CASE("learning rate decays on plateaus and training stops after the last decay") {
    const auto m = build(tiny(Family::ArchA), 2);
    auto c = quick(60);
    c.lr = 0.05;  // too large to make steady validation progress
    c.decay_patience = 1;
    c.stop_after_decays = 2;
    const auto r = train(m, small_data(), small_partition().d1_tenth, c, "d1_tenth");
    std::set<double> rates;
    for (const auto& h : r.history) rates.insert(h.lr);
    CHECK(rates.size() <= 3);
    CHECK(r.history.size() < 60);
    for (std::size_t i = 1; i < r.history.size(); ++i) CHECK(r.history[i].lr <= r.history[i - 1].lr);
}

TEST_CASE("the kept model is the best validation epoch") {
    const auto m = build(tiny(Family::ArchA), 4);
    const auto r = train(m, small_data(), small_partition().d1, quick(4), "d1");
    const auto ev = evaluate(r.model, small_data(), small_partition().d1.validation);
    double best = 1e9;
    for (const auto& h : r.history) best = std::min(best, h.val_loss);
    CHECK(ev.loss == doctest::Approx(best).epsilon(1e-6));
}

TEST_CASE("training errors") {
    const auto m = build(tiny(Family::ArchA, 2), 1);
    CHECK_THROWS_AS(train(m, small_data(), small_partition().d1, quick(), "d1"), TrainingError);
    SubsetSplit empty;
    CHECK_THROWS_AS(train(build(tiny(Family::ArchA), 1), small_data(), empty, quick(), "x"), TrainingError);
    auto c = quick();
    c.lr = 1e30;
    try {
        train(build(tiny(Family::ArchA), 1), small_data(), small_partition().d1, c, "d1");
    } catch (const TrainingError& e) {
        CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
}

TEST_CASE("pretraining, then fine-tuning changes body weights") {
    const auto src = generate_source_task(300, 4);
    const auto hold = holdout(src, 0.1, 1);
    const auto spec = tiny(Family::ArchB);
    const auto a = pretrain(spec, src, hold, quick(1), 11);
    const auto b = pretrain(spec, src, hold, quick(1), 11);
    CHECK(a.model == b.model);
    CHECK(a.model.spec().arity == kSourceArity);
    CHECK(a.model.provenance().is_source);

    const auto start = load_pretrained(spec, a.model, 3);
    const auto tuned = train(start, small_data(), small_partition().d1, quick(1), "d1");
    const std::size_t body = head_offset(spec);
    bool changed = false;
    for (std::size_t i = 0; i < body; ++i) changed |= tuned.model.params()[i] != start.params()[i];
    CHECK(changed);
    CHECK(tuned.model.provenance().init == InitMode::Pretrained);
}

TEST_CASE("predict and evaluate") {
    const auto m = build(tiny(Family::ArchA), 8);
    const auto& d = small_data();
    const auto& idx = small_partition().test;
    const auto full = predict(m, d.images(idx));
    const auto chunked = predict(m, d.images(idx), 5);
    CHECK(std::equal(full.values().begin(), full.values().end(), chunked.values().begin()));
    const auto ev = evaluate(m, d, idx);
    CHECK(std::isfinite(ev.loss));
    CHECK(ev.auc >= 0.0);
    CHECK(ev.auc <= 1.0);
}

TEST_CASE("history csv") {
    const auto path = fs::temp_directory_path() / "transferlab-test-history.csv";
    write_history_csv({{1, 0.7, 0.6, 0.55, 1e-3}, {2, 0.5, 0.4, 0.75, 3e-4}}, path);
    std::ifstream in(path);
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    CHECK(header == "epoch,train_loss,val_loss,val_auc,lr");
    CHECK(row.rfind("1,", 0) == 0);
    fs::remove(path);
}
