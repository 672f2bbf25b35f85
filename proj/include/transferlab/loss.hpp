#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "transferlab/tensor.hpp"

namespace tl {

inline constexpr double kProbabilityClamp = 1e-7;

enum class OutputReduction { Sum, Mean };

template <class T>
struct LossResult {
    double value = 0.0;
    Tensor<T> grad;  // dLoss/dProbabilities, same shape as the predictions
};

/// Binary cross-entropy on probabilities (N x K). Probabilities are clamped to
/// [1e-7, 1 - 1e-7] before the log; the returned gradient treats the clamp as
/// identity so saturated predictions still carry a usable direction.
/// The value is averaged over the batch and summed (or averaged) over outputs.
template <class T>
LossResult<T> bce_loss(const Tensor<T>& probs, const Tensor<T>& labels, OutputReduction reduce = OutputReduction::Sum) {
    if (probs.shape() != labels.shape()) {
        throw std::invalid_argument("bce: prediction shape " + to_string(probs.shape()) + " != label shape " +
                                    to_string(labels.shape()));
    }
    const std::size_t batch = probs.batch();
    const std::size_t outputs = probs.sample_size();
    const double scale = 1.0 / static_cast<double>(batch) /
                         (reduce == OutputReduction::Mean ? static_cast<double>(outputs) : 1.0);
    LossResult<T> r{0.0, Tensor<T>(probs.shape())};
    double total = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = std::clamp(static_cast<double>(probs[i]), kProbabilityClamp, 1.0 - kProbabilityClamp);
        const double y = static_cast<double>(labels[i]);
        total += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
        r.grad[i] = static_cast<T>(scale * (-(y / p) + (1.0 - y) / (1.0 - p)));
    }
    r.value = total * scale;
    return r;
}

}  // namespace tl
