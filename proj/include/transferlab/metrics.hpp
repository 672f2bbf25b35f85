#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace tl {

class MetricError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// ROC AUC via the Mann-Whitney statistic with average ranks for ties.
double auc(std::span<const double> scores, std::span<const double> labels);
double auc(std::span<const float> scores, std::span<const float> labels);

struct MeanAuc {
    double value = 0.0;
    std::vector<std::size_t> skipped_columns;  // single-class columns
};

/// Unweighted mean of per-column AUCs over row-major N x K matrices.
/// Columns without both classes are skipped and reported.
MeanAuc mean_auc(std::span<const float> scores, std::span<const float> labels, std::size_t columns);

struct SsimParams {
    std::size_t window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 2.0;  // data live in [-1, 1]

    std::vector<double> gaussian_window() const;  // window x window, sums to 1
};

/// Mean of the local SSIM map over every position where the window fits.
double ssim(std::span<const float> x, std::span<const float> y, std::size_t height, std::size_t width,
            const SsimParams& params = {});

/// Arithmetic mean of per-image SSIM over pairs of images stored back to back.
double mean_ssim(std::span<const float> originals, std::span<const float> others, std::size_t height, std::size_t width,
                 const SsimParams& params = {});

}  // namespace tl
