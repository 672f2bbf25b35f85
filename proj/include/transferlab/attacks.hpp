#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "transferlab/metrics.hpp"
#include "transferlab/models.hpp"

namespace tl {

enum class Method : std::uint32_t { FGSM = 0, PGD = 1 };

const char* to_string(Method m);
Method parse_method(const std::string& s);

inline const std::vector<double>& default_epsilons() {
    static const std::vector<double> eps{0.01, 0.02, 0.03, 0.04, 0.05, 0.06};
    return eps;
}

struct AttackConfig {
    Method method = Method::FGSM;
    double epsilon = 0.02;  // L-infinity budget on the [-1, 1] scale
    double alpha = 0.01;    // PGD step
    std::size_t iterations = 20;
    bool range_clip = true;  // clip results back into [-1, 1]
    std::uint64_t shuffle_seed = 0;

    void validate() const;
};

class AttackError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AdversarialBatch {
    Tensor<float> original;      // N x C x H x W
    Tensor<float> adversarial;
    Tensor<float> perturbation;  // adversarial - original
    Tensor<float> control;       // original + shuffled perturbation, clipped
    std::vector<float> step;     // FGSM only: eps * sign(grad) before clipping
    std::vector<double> ssim;    // per image, adversarial vs original

    double mean_ssim() const;
};

/// Gradient of the summed BCE (all outputs) with respect to the input.
/// Throws AttackError naming the first sample with a non-finite entry.
Tensor<float> loss_input_gradient(Graph<float>& graph, const Tensor<float>& images, const Tensor<float>& labels);

/// White-box primitives on a bound graph. sign(0) = 0.
Tensor<float> fgsm(Graph<float>& graph, const Tensor<float>& images, const Tensor<float>& labels, double epsilon,
                   bool range_clip = true, std::vector<float>* step = nullptr);
/// Iterates from x itself; every step is projected onto the eps-ball around
/// the original images, then clipped to the valid range.
Tensor<float> pgd(Graph<float>& graph, const Tensor<float>& images, const Tensor<float>& labels, double epsilon,
                  double alpha, std::size_t iterations, bool range_clip = true);

/// Per-image random permutation of the perturbation values.
/// Image n is shuffled with a stream derived from (seed, n).
std::vector<float> shuffle_control(std::span<const float> perturbation, std::size_t image_size, std::uint64_t seed);

/// Replaces the control images with a fresh shuffle of the stored perturbation.
void rebuild_control(AdversarialBatch& batch, std::uint64_t seed, bool range_clip = true);

/// Crafts on the surrogate alone, in chunks of at most `chunk` images.
AdversarialBatch craft(const Model& surrogate, const Tensor<float>& images, const Tensor<float>& labels,
                       const AttackConfig& config, std::size_t chunk = 128);

/// The only handle a transfer attack gets on its target: a score oracle that
/// counts how often it is asked.
class TargetEvaluator {
public:
    explicit TargetEvaluator(const Model& target) : target_(target) {}

    Tensor<float> scores(const Tensor<float>& images);
    std::size_t invocations() const noexcept { return calls_; }
    std::size_t arity() const noexcept { return target_.spec().arity; }
    Shape input_shape() const;

private:
    const Model& target_;
    std::size_t calls_ = 0;
};

/// AUC for N x 1 scores, mean column AUC for N x K.
double score_auc(const Tensor<float>& scores, const Tensor<float>& labels);

struct TransferResult {
    Tensor<float> clean_scores;
    Tensor<float> adversarial_scores;
    Tensor<float> control_scores;
    double clean_auc = 0.0;
    double adversarial_auc = 0.0;
    double control_auc = 0.0;
    std::size_t evaluator_calls = 0;  // calls made by this evaluation
};

/// Scores a crafted batch on the target: clean, adversarial, control.
TransferResult evaluate_transfer(const AdversarialBatch& batch, const Tensor<float>& labels, TargetEvaluator& target);

struct TransferAttack {
    AdversarialBatch batch;
    TransferResult result;
    std::size_t calls_during_crafting = 0;
};

TransferAttack transfer_attack(const Model& surrogate, TargetEvaluator& target, const Tensor<float>& images,
                               const Tensor<float>& labels, const AttackConfig& config);

/// Counts of violated per-batch invariants.
struct InvariantReport {
    std::size_t linf = 0;     // |adv - x| above eps + 1 ulp
    std::size_t range = 0;    // adversarial or control pixels outside [-1, 1]
    std::size_t fgsm_step = 0;  // FGSM step values other than -eps, 0, +eps
    std::size_t control = 0;  // images whose shuffled noise is not a permutation
    std::size_t batches = 0;

    bool ok() const noexcept { return linf + range + fgsm_step + control == 0; }
    InvariantReport& operator+=(const InvariantReport& o);
    std::string describe() const;
};

InvariantReport check_invariants(const AdversarialBatch& batch, const AttackConfig& config);

/// Mean BCE of a model on a batch.
double batch_loss(const Model& model, const Tensor<float>& images, const Tensor<float>& labels);

/// 8-bit binary PGM, linear map [lo, hi] -> [0, 255].
void write_pgm(const std::filesystem::path& path, std::span<const float> image, std::size_t height, std::size_t width,
               double lo = -1.0, double hi = 1.0);
/// Original, adversarial, control and noise (scaled by 1/eps) of image `index`.
void dump_images(const std::filesystem::path& dir, const AdversarialBatch& batch, std::size_t index, double epsilon);

}  // namespace tl
