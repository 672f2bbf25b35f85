#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "metric_oracles.hpp"
#include "transferlab/metrics.hpp"

using namespace tl;
using namespace tl::testing;

TEST_CASE("auc equals brute-force pair counting on random tied instances") {
    std::mt19937_64 rng(11);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const auto inst = random_instance(rng);
        const double fast = auc(std::span<const double>(inst.scores), std::span<const double>(inst.labels));
        worst = std::max(worst, std::abs(fast - brute_force_auc(inst.scores, inst.labels)));
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("auc corner cases") {
    const std::vector<double> y{0, 0, 1, 1};
    CHECK(auc(std::span<const double>(std::vector<double>{0.1, 0.2, 0.3, 0.4}), y) == 1.0);
    CHECK(auc(std::span<const double>(std::vector<double>{0.4, 0.3, 0.2, 0.1}), y) == 0.0);
    CHECK(auc(std::span<const double>(std::vector<double>{0.5, 0.5, 0.5, 0.5}), y) == 0.5);
    CHECK_THROWS_AS(auc(std::span<const double>(std::vector<double>{0.1, 0.2}), std::vector<double>{1, 1}), MetricError);
    CHECK_THROWS_AS(auc(std::span<const double>(std::vector<double>{0.1, 0.2}), std::vector<double>{1, 2}), MetricError);
    CHECK_THROWS_AS(auc(std::span<const double>(std::vector<double>{0.1}), std::vector<double>{1, 0}), MetricError);
}

TEST_CASE("auc is invariant under strictly increasing transforms") {
    std::mt19937_64 rng(12);
    for (int t = 0; t < 200; ++t) {
        auto inst = random_instance(rng);
        const double a = auc(std::span<const double>(inst.scores), inst.labels);
        for (auto& s : inst.scores) s = std::exp(3.0 * s) - 7.0;
        CHECK(auc(std::span<const double>(inst.scores), inst.labels) == doctest::Approx(a).epsilon(1e-15));
    }
}

TEST_CASE("mean auc averages columns and reports single-class ones") {
    // column 0 perfect, column 1 reversed, column 2 all positive
    const std::vector<float> s{0.1f, 0.9f, 0.5f, 0.9f, 0.1f, 0.5f};
    const std::vector<float> y{0, 0, 1, 1, 1, 1};
    const auto m = mean_auc(s, y, 3);
    CHECK(m.value == doctest::Approx(0.5));
    REQUIRE(m.skipped_columns.size() == 1);
    CHECK(m.skipped_columns[0] == 2);
    CHECK_THROWS_AS(mean_auc(s, y, 4), MetricError);
}

TEST_CASE("ssim of an image with itself is exactly one") {
    std::mt19937_64 rng(13);
    for (int t = 0; t < 20; ++t) {
        const auto x = random_image(32 * 32, rng);
        CHECK(ssim(x, x, 32, 32) == 1.0);
    }
}

TEST_CASE("ssim of constant images matches the closed form") {
    const SsimParams p;
    const double c1 = (p.k1 * p.dynamic_range) * (p.k1 * p.dynamic_range);
    const std::pair<float, float> cases[] = {{0.5f, 0.0f}, {-0.25f, 0.75f}, {1.0f, -1.0f}, {0.3f, 0.3f}};
    for (auto [a, b] : cases) {
        const std::vector<float> x(16 * 16, a), y(16 * 16, b);
        const double expect = (2.0 * a * b + c1) / (static_cast<double>(a) * a + static_cast<double>(b) * b + c1);
        CHECK(std::abs(ssim(x, y, 16, 16) - expect) < 1e-9);
    }
    const std::vector<float> half(16 * 16, 0.5f), zero(16 * 16, 0.0f);
    CHECK(std::abs(ssim(half, zero, 16, 16) - c1 / (0.25 + c1)) < 1e-9);
}

TEST_CASE("ssim is symmetric and bounded") {
    std::mt19937_64 rng(14);
    for (int t = 0; t < 50; ++t) {
        const auto x = random_image(24 * 20, rng);
        auto y = x;
        std::normal_distribution<float> noise(0.0f, 0.05f * static_cast<float>(t % 10 + 1));
        for (auto& v : y) v = std::clamp(v + noise(rng), -1.0f, 1.0f);
        const double a = ssim(x, y, 24, 20), b = ssim(y, x, 24, 20);
        CHECK(std::abs(a - b) < 1e-9);
        CHECK(a <= 1.0);
        CHECK(a >= -1.0);
    }
}

TEST_CASE("ssim decreases as noise grows") {
    std::mt19937_64 rng(15);
    const auto x = random_image(32 * 32, rng);
    std::vector<float> dir(x.size());
    std::uniform_int_distribution<int> sign(0, 1);
    for (auto& d : dir) d = sign(rng) ? 1.0f : -1.0f;
    double prev = 1.0;
    for (float eps : {0.01f, 0.02f, 0.04f, 0.08f}) {
        std::vector<float> y(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + eps * dir[i];
        const double s = ssim(x, y, 32, 32);
        CHECK(s < prev);
        prev = s;
    }
}

TEST_CASE("ssim rejects bad inputs") {
    const std::vector<float> small(8 * 8, 0.0f);
    CHECK_THROWS_AS(ssim(small, small, 8, 8), MetricError);
    const std::vector<float> a(16 * 16, 0.0f), b(16 * 15, 0.0f);
    CHECK_THROWS_AS(ssim(a, b, 16, 16), MetricError);
    SsimParams p;
    p.sigma = 0.0;
    CHECK_THROWS_AS(ssim(a, a, 16, 16, p), MetricError);
}

TEST_CASE("gaussian window sums to one and is symmetric") {
    const auto w = SsimParams{}.gaussian_window();
    double sum = 0.0;
    for (double v : w) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(w[0] == w[10]);
    CHECK(w[0] == w[120]);
    CHECK(w[60] > w[59]);
}

TEST_CASE("mean ssim averages per-image values") {
    std::mt19937_64 rng(16);
    const auto x1 = random_image(256, rng), x2 = random_image(256, rng), y2 = random_image(256, rng);
    std::vector<float> xs(x1), ys(x1);
    xs.insert(xs.end(), x2.begin(), x2.end());
    ys.insert(ys.end(), y2.begin(), y2.end());
    CHECK(mean_ssim(xs, ys, 16, 16) == doctest::Approx((1.0 + ssim(x2, y2, 16, 16)) / 2.0));
}
