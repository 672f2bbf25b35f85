#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "transferlab/datasets.hpp"
#include "transferlab/models.hpp"
#include "transferlab/rng.hpp"

namespace tl {

enum Augment : unsigned {
    kAugmentNone = 0,
    kAugmentHFlip = 1u << 0,
    kAugmentVFlip = 1u << 1,
    kAugmentRot90 = 1u << 2,
    kAugmentAll = kAugmentHFlip | kAugmentVFlip | kAugmentRot90,
};

struct TrainConfig {
    std::size_t batch_size = 32;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double decay_factor = 0.3;
    std::size_t decay_patience = 3;     // stalled epochs before the lr decays
    std::size_t stop_after_decays = 3;  // a further stall after this many decays ends training
    std::size_t max_epochs = 30;
    bool class_balancing = true;
    unsigned augment = kAugmentAll;
    std::uint64_t seed = 0;

    void validate() const;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_auc = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    Model model;  // parameters of the epoch with the lowest validation loss
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
};

/// Batch index lists for one epoch. With balancing on (binary labels only)
/// positions alternate between the classes, cycling the minority class.
std::vector<std::vector<std::size_t>> epoch_batches(const Dataset& data, const std::vector<std::size_t>& train,
                                                    const TrainConfig& config, Rng& rng);

/// Trains with Adam and plateau learning-rate decay, early-stopping on
/// validation loss. All layers are updated.
TrainResult train(const Model& model, const Dataset& data, const SubsetSplit& subset, const TrainConfig& config,
                  const std::string& set_id);

/// Random-init model trained on the source task; marked as a source checkpoint.
TrainResult pretrain(const ArchSpec& spec, const Dataset& source, const SubsetSplit& subset, const TrainConfig& config,
                     std::uint64_t init_seed);

struct Evaluation {
    double loss = 0.0;
    double auc = 0.0;
};

/// Batched prediction (N x arity probabilities).
Tensor<float> predict(const Model& model, const Tensor<float>& images, std::size_t chunk = 256);
Evaluation evaluate(const Model& model, const Dataset& data, const std::vector<std::size_t>& indices);

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path);

}  // namespace tl
