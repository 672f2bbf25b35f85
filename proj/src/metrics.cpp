#include "transferlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace tl {

namespace {

template <class S, class L>
double auc_impl(std::span<const S> scores, std::span<const L> labels) {
    if (scores.size() != labels.size()) throw MetricError("auc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double positives = 0.0;
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k) {
            const double y = static_cast<double>(labels[order[k]]);
            if (y != 0.0 && y != 1.0) throw MetricError("auc: labels must be 0 or 1");
            if (y == 1.0) {
                positives += 1.0;
                rank_sum += avg_rank;
            }
        }
        i = j;
    }
    const double negatives = static_cast<double>(n) - positives;
    if (positives == 0.0 || negatives == 0.0) throw MetricError("auc: undefined for single-class input");
    return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

}  // namespace

double auc(std::span<const double> scores, std::span<const double> labels) { return auc_impl(scores, labels); }
double auc(std::span<const float> scores, std::span<const float> labels) { return auc_impl(scores, labels); }

MeanAuc mean_auc(std::span<const float> scores, std::span<const float> labels, std::size_t columns) {
    if (columns == 0 || scores.size() != labels.size() || scores.size() % columns != 0)
        throw MetricError("mean_auc: matrices must be N x K with matching shapes");
    const std::size_t rows = scores.size() / columns;
    MeanAuc out;
    double total = 0.0;
    std::size_t used = 0;
    std::vector<float> s(rows), l(rows);
    for (std::size_t c = 0; c < columns; ++c) {
        bool pos = false, neg = false;
        for (std::size_t r = 0; r < rows; ++r) {
            s[r] = scores[r * columns + c];
            l[r] = labels[r * columns + c];
            (l[r] == 1.0f ? pos : neg) = true;
        }
        if (!pos || !neg) {
            out.skipped_columns.push_back(c);
            continue;
        }
        total += auc(std::span<const float>(s), std::span<const float>(l));
        ++used;
    }
    if (used == 0) throw MetricError("mean_auc: every column is single-class");
    out.value = total / static_cast<double>(used);
    return out;
}

std::vector<double> SsimParams::gaussian_window() const {
    if (window == 0 || sigma <= 0.0) throw MetricError("ssim: window and sigma must be positive");
    std::vector<double> w(window * window);
    const double c = (static_cast<double>(window) - 1.0) / 2.0;
    double sum = 0.0;
    for (std::size_t y = 0; y < window; ++y)
        for (std::size_t x = 0; x < window; ++x) {
            const double dy = static_cast<double>(y) - c, dx = static_cast<double>(x) - c;
            w[y * window + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            sum += w[y * window + x];
        }
    for (double& v : w) v /= sum;
    return w;
}

double ssim(std::span<const float> x, std::span<const float> y, std::size_t height, std::size_t width,
            const SsimParams& params) {
    if (x.size() != y.size() || x.size() != height * width) throw MetricError("ssim: images must share an HxW shape");
    if (params.k1 <= 0.0 || params.k2 <= 0.0) throw MetricError("ssim: stabilizers must be positive");
    const std::size_t win = params.window;
    if (height < win || width < win) {
        throw MetricError("ssim: image " + std::to_string(height) + "x" + std::to_string(width) +
                          " smaller than window " + std::to_string(win));
    }
    const auto w = params.gaussian_window();
    const double c1 = (params.k1 * params.dynamic_range) * (params.k1 * params.dynamic_range);
    const double c2 = (params.k2 * params.dynamic_range) * (params.k2 * params.dynamic_range);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t oy = 0; oy + win <= height; ++oy)
        for (std::size_t ox = 0; ox + win <= width; ++ox) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (std::size_t ky = 0; ky < win; ++ky)
                for (std::size_t kx = 0; kx < win; ++kx) {
                    const double wk = w[ky * win + kx];
                    const double a = x[(oy + ky) * width + ox + kx];
                    const double b = y[(oy + ky) * width + ox + kx];
                    mx += wk * a;
                    my += wk * b;
                    sxx += wk * a * a;
                    syy += wk * b * b;
                    sxy += wk * a * b;
                }
            const double vx = sxx - mx * mx;
            const double vy = syy - my * my;
            const double cov = sxy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++count;
        }
    return total / static_cast<double>(count);
}

double mean_ssim(std::span<const float> originals, std::span<const float> others, std::size_t height, std::size_t width,
                 const SsimParams& params) {
    const std::size_t plane = height * width;
    if (originals.size() != others.size() || plane == 0 || originals.size() % plane != 0 || originals.empty())
        throw MetricError("mean_ssim: image sets must be non-empty and equally shaped");
    const std::size_t n = originals.size() / plane;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        total += ssim(originals.subspan(i * plane, plane), others.subspan(i * plane, plane), height, width, params);
    return total / static_cast<double>(n);
}

}  // namespace tl
