#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "fd_oracle.hpp"
#include "transferlab/models.hpp"

using namespace tl;
namespace fs = std::filesystem;

namespace {

std::size_t conv_params(std::size_t in, std::size_t out, std::size_t k) { return out * in * k * k + out; }

// Parameter count by layer algebra, independent of the graph builder.
std::size_t expected_params(const ArchSpec& s) {
    std::size_t total = conv_params(s.channels, s.stem, 3);
    std::size_t c = s.stem;
    if (s.family == Family::ArchA) {
        const std::size_t w = s.width_knob;
        for (std::uint32_t b = 0; b < s.blocks; ++b) {
            total += conv_params(c, w, 1) + conv_params(c, w, 3) + conv_params(c, w / 2, 5);
            c = w + w + w / 2;
        }
    } else {
        for (std::uint32_t b = 0; b < s.blocks; ++b) {
            for (std::uint32_t l = 0; l < s.layers; ++l) {
                total += conv_params(c, s.width_knob, 3);
                c += s.width_knob;
            }
            const std::size_t t = (c + 1) / 2;
            total += conv_params(c, t, 1);
            c = t;
        }
    }
    return total + c * s.arity + s.arity;
}

ArchSpec random_spec(std::mt19937_64& rng) {
    auto pick = [&rng](std::uint32_t lo, std::uint32_t hi) { return std::uniform_int_distribution<std::uint32_t>(lo, hi)(rng); };
    ArchSpec s = ArchSpec::defaults(pick(0, 1) ? Family::ArchB : Family::ArchA, pick(1, 3));
    s.height = pick(8, 20);
    s.width = pick(8, 20);
    s.stem = pick(1, 6);
    s.width_knob = pick(2, 6);
    s.blocks = pick(1, 2);
    s.layers = pick(1, 3);
    return s;
}

}  // namespace

TEST_CASE("default architectures have the documented parameter counts") {
    CHECK(param_count(ArchSpec::defaults(Family::ArchA)) == 3231);
    CHECK(param_count(ArchSpec::defaults(Family::ArchB)) == 3171);
}

TEST_CASE("parameter count matches layer algebra for random specs") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 60; ++t) {
        const auto s = random_spec(rng);
        CHECK(param_count(s) == expected_params(s));
    }
}

TEST_CASE("families share no block type") {
    const auto a = build_graph<float>(ArchSpec::defaults(Family::ArchA));
    const auto b = build_graph<float>(ArchSpec::defaults(Family::ArchB));
    auto has = [](const Graph<float>& g, const std::string& part) {
        for (const auto& p : g.params())
            if (p.name.find(part) != std::string::npos) return true;
        return false;
    };
    CHECK(has(a, "b5x5"));
    CHECK_FALSE(has(b, "b5x5"));
    CHECK(has(b, "transition"));
    CHECK_FALSE(has(a, "transition"));
}

TEST_CASE("output is a probability per label") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 10; ++t) {
        const auto s = random_spec(rng);
        const auto m = build(s, rng());
        auto g = m.graph();
        Tensor<float> x({3, 1, s.height, s.width}, 0.3f);
        const auto& y = g.forward(x);
        CHECK(y.shape() == Shape{3, s.arity});
        for (float v : y.values()) {
            CHECK(v > 0.0f);
            CHECK(v < 1.0f);
        }
    }
}

TEST_CASE("invalid specs are rejected") {
    ArchSpec s = ArchSpec::defaults(Family::ArchA);
    s.blocks = 0;
    CHECK_THROWS_AS(s.validate(), ModelError);
    s = ArchSpec::defaults(Family::ArchA);
    s.height = 4;
    CHECK_THROWS_AS(build(s, 1), ModelError);
    s = ArchSpec::defaults(Family::ArchB);
    s.layers = 0;
    CHECK_THROWS_AS(build(s, 1), ModelError);
    CHECK_THROWS_AS(Model(ArchSpec::defaults(Family::ArchA), std::vector<float>(10), {}), ModelError);
    CHECK_THROWS_AS(parse_family("C"), std::invalid_argument);
    CHECK(parse_init_mode("pretrained") == InitMode::Pretrained);
}

TEST_CASE("He initialization: seeded, zero biases, fan-in scaled weights") {
    const auto spec = ArchSpec::defaults(Family::ArchB);
    const auto a = build(spec, 3), b = build(spec, 3), c = build(spec, 4);
    CHECK(a == b);
    CHECK_FALSE(a == c);
    const auto g = build_graph<float>(spec);
    for (const auto& p : g.params()) {
        const auto v = a.params().subspan(p.offset, p.size);
        if (p.shape.size() == 1) {
            for (float x : v) CHECK(x == 0.0f);
        } else if (p.size >= 200) {
            double ss = 0.0;
            for (float x : v) ss += static_cast<double>(x) * x;
            const double expect = 2.0 / static_cast<double>(p.size / p.shape[0]);
            CHECK(ss / static_cast<double>(p.size) == doctest::Approx(expect).epsilon(0.35));
        }
    }
}

TEST_CASE("full architectures pass the finite-difference check") {
    std::mt19937_64 rng(8);
    for (Family f : {Family::ArchA, Family::ArchB}) {
        ArchSpec s = ArchSpec::defaults(f);
        s.height = s.width = 12;
        s.stem = 3;
        s.width_knob = 2;
        const auto m = build(s, rng());
        std::vector<double> p;
        auto g = m.graph_f64(p);
        std::normal_distribution<double> d(0.0, 0.5);
        Tensor<double> x({2, 1, 12, 12});
        for (auto& v : x.values()) v = d(rng);
        Tensor<double> y({2, 1}, {1.0, 0.0});
        testing::ProbeLoss loss;
        loss.labels = &y;
        const auto st = testing::check_gradients(g, p, x, loss, 60, rng());
        CHECK(st.checked > 60);
        CHECK(st.worst < 1e-4);
    }
}

TEST_CASE("pretrained loading copies the body and re-initializes the head") {
    const auto src_spec = [] {
        ArchSpec s = ArchSpec::defaults(Family::ArchA, 4);
        return s;
    }();
    const auto source = build(src_spec, 10);
    const auto spec = ArchSpec::defaults(Family::ArchA, 1);
    const auto m = load_pretrained(spec, source, 77);
    const std::size_t body = head_offset(spec);
    CHECK(body == head_offset(src_spec));
    for (std::size_t i = 0; i < body; ++i) REQUIRE(m.params()[i] == source.params()[i]);
    CHECK(m.provenance().init == InitMode::Pretrained);
    CHECK(m.provenance().source_checkpoint == checkpoint_id(source));
    CHECK(load_pretrained(spec, source, 77) == m);
    CHECK_THROWS_AS(load_pretrained(ArchSpec::defaults(Family::ArchB), source, 1), ModelError);
    ArchSpec wider = spec;
    wider.stem = 9;
    CHECK_THROWS_AS(load_pretrained(wider, source, 1), ModelError);
}

TEST_CASE("checkpoint round trip and corruption") {
    auto m = build(ArchSpec::defaults(Family::ArchB), 5);
    Provenance p = m.provenance();
    p.training_set = "d2_half";
    p.training_seed = 99;
    m = m.with_provenance(p);
    const auto bytes = serialize(m);
    CHECK(deserialize(bytes) == m);
    CHECK(checkpoint_id(deserialize(bytes)) == checkpoint_id(m));

    const auto dir = fs::temp_directory_path() / "transferlab-test-ckpt";
    fs::create_directories(dir);
    save_checkpoint(m, dir / "m.tlck");
    CHECK(load_checkpoint(dir / "m.tlck") == m);
    fs::remove_all(dir);

    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(deserialize(bad), ModelError);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 3);
    CHECK_THROWS_AS(deserialize(truncated), ModelError);
    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(deserialize(trailing), ModelError);
    auto version = bytes;
    version[4] = 9;
    CHECK_THROWS_AS(deserialize(version), ModelError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.tlck"), ModelError);
}
