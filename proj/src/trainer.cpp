#include "transferlab/trainer.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "transferlab/loss.hpp"
#include "transferlab/metrics.hpp"

namespace tl {

void TrainConfig::validate() const {
    if (batch_size == 0) throw TrainingError("train config: batch_size must be positive");
    if (!(lr > 0.0)) throw TrainingError("train config: lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw TrainingError("train config: Adam betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw TrainingError("train config: eps must be positive");
    if (!(decay_factor > 0.0 && decay_factor < 1.0)) throw TrainingError("train config: decay_factor must lie in (0, 1)");
    if (decay_patience == 0) throw TrainingError("train config: decay_patience must be >= 1");
    if (max_epochs == 0) throw TrainingError("train config: max_epochs must be >= 1");
    if (augment & ~static_cast<unsigned>(kAugmentAll)) throw TrainingError("train config: unknown augmentation bits");
}

std::vector<std::vector<std::size_t>> epoch_batches(const Dataset& data, const std::vector<std::size_t>& train,
                                                    const TrainConfig& config, Rng& rng) {
    std::vector<std::size_t> order;
    if (config.class_balancing) {
        if (data.arity != 1) throw TrainingError("class balancing needs binary labels (arity 1)");
        std::vector<std::size_t> pos, neg;
        for (auto i : train) (data.labels[i] == 1.0f ? pos : neg).push_back(i);
        if (pos.empty() || neg.empty()) throw TrainingError("class balancing: a class has no training samples");
        std::shuffle(pos.begin(), pos.end(), rng);
        std::shuffle(neg.begin(), neg.end(), rng);
        std::size_t ip = 0, in = 0;
        order.reserve(train.size());
        for (std::size_t k = 0; k < train.size(); ++k) {
            auto& list = (k % 2 == 0) ? pos : neg;
            auto& cursor = (k % 2 == 0) ? ip : in;
            if (cursor == list.size()) {
                std::shuffle(list.begin(), list.end(), rng);
                cursor = 0;
            }
            order.push_back(list[cursor++]);
        }
    } else {
        order = train;
        std::shuffle(order.begin(), order.end(), rng);
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
        const std::size_t e = std::min(order.size(), b + config.batch_size);
        if (e - b < 2 && !batches.empty()) {
            batches.back().insert(batches.back().end(), order.begin() + static_cast<std::ptrdiff_t>(b), order.end());
            break;
        }
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b), order.begin() + static_cast<std::ptrdiff_t>(e));
    }
    return batches;
}

namespace {

void augment(Tensor<float>& images, unsigned mask, Rng& rng) {
    if (mask == kAugmentNone) return;
    const std::size_t h = images.dim(2), w = images.dim(3);
    std::bernoulli_distribution coin(0.5);
    std::uniform_int_distribution<int> turns(0, 3);
    for (std::size_t n = 0; n < images.batch(); ++n) {
        auto img = images.sample(n);
        if ((mask & kAugmentHFlip) && coin(rng)) hflip(img, h, w);
        if ((mask & kAugmentVFlip) && coin(rng)) vflip(img, h, w);
        if ((mask & kAugmentRot90) && h == w) {
            for (int t = turns(rng); t > 0; --t) rot90(img, h);
        }
    }
}

class Adam {
public:
    Adam(std::size_t n, const TrainConfig& c) : m_(n, 0.0), v_(n, 0.0), c_(c) {}

    void step(std::span<float> params, std::span<const float> grad, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(c_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(c_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = grad[i];
            m_[i] = c_.beta1 * m_[i] + (1.0 - c_.beta1) * g;
            v_[i] = c_.beta2 * v_[i] + (1.0 - c_.beta2) * g * g;
            const double mh = m_[i] / bc1;
            const double vh = v_[i] / bc2;
            params[i] = static_cast<float>(static_cast<double>(params[i]) - lr * mh / (std::sqrt(vh) + c_.eps));
        }
    }

private:
    std::vector<double> m_, v_;
    const TrainConfig& c_;
    std::size_t t_ = 0;
};

}  // namespace

Tensor<float> predict(const Model& model, const Tensor<float>& images, std::size_t chunk) {
    auto g = model.graph();
    const std::size_t n = images.batch();
    const std::size_t per = images.sample_size();
    const std::size_t arity = model.spec().arity;
    Tensor<float> out({n, arity});
    for (std::size_t b = 0; b < n; b += chunk) {
        const std::size_t e = std::min(n, b + chunk);
        Shape s = images.shape();
        s[0] = e - b;
        Tensor<float> part(s, std::vector<float>(images.values().begin() + static_cast<std::ptrdiff_t>(b * per),
                                                 images.values().begin() + static_cast<std::ptrdiff_t>(e * per)));
        const auto& p = g.forward(part);
        std::copy(p.values().begin(), p.values().end(), out.data() + b * arity);
    }
    return out;
}

Evaluation evaluate(const Model& model, const Dataset& data, const std::vector<std::size_t>& indices) {
    const auto probs = predict(model, data.images(indices));
    const auto labels = data.label_tensor(indices);
    Evaluation e;
    e.loss = bce_loss(probs, labels).value;
    try {
        e.auc = data.arity == 1 ? auc(probs.values(), labels.values())
                                : mean_auc(probs.values(), labels.values(), data.arity).value;
    } catch (const MetricError&) {
        e.auc = std::numeric_limits<double>::quiet_NaN();
    }
    return e;
}

TrainResult train(const Model& model, const Dataset& data, const SubsetSplit& subset, const TrainConfig& config,
                  const std::string& set_id) {
    config.validate();
    if (subset.train.empty() || subset.validation.empty())
        throw TrainingError("train: subset needs non-empty train and validation slices");
    if (model.spec().arity != data.arity) {
        throw TrainingError("train: model arity " + std::to_string(model.spec().arity) + " != dataset arity " +
                            std::to_string(data.arity));
    }
    Model work = model;
    auto params = work.mutable_params();
    auto graph = build_graph<float>(work.spec());
    graph.bind(params);
    Adam adam(params.size(), config);
    Rng rng(config.seed);

    TrainResult result{model, {}, 0};
    std::vector<float> best(params.begin(), params.end());
    double best_loss = std::numeric_limits<double>::infinity();
    double lr = config.lr;
    std::size_t stalls = 0, decays = 0;

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        double total = 0.0;
        std::size_t seen = 0;
        for (const auto& batch : epoch_batches(data, subset.train, config, rng)) {
            auto images = data.images(batch);
            augment(images, config.augment, rng);
            const auto labels = data.label_tensor(batch);
            const auto& probs = graph.forward(images);
            const auto loss = bce_loss(probs, labels);
            if (!std::isfinite(loss.value))
                throw TrainingError("train: loss diverged (non-finite) in epoch " + std::to_string(epoch));
            graph.backward(loss.grad, true, false);
            adam.step(params, graph.param_grad(), lr);
            total += loss.value * static_cast<double>(batch.size());
            seen += batch.size();
        }
        const auto val = evaluate(work, data, subset.validation);
        if (!std::isfinite(val.loss))
            throw TrainingError("train: validation loss diverged (non-finite) in epoch " + std::to_string(epoch));
        result.history.push_back({epoch, total / static_cast<double>(seen), val.loss, val.auc, lr});
        if (val.loss < best_loss) {
            best_loss = val.loss;
            best.assign(params.begin(), params.end());
            result.best_epoch = epoch;
            stalls = 0;
        } else if (++stalls >= config.decay_patience) {
            if (decays >= config.stop_after_decays) break;
            lr *= config.decay_factor;
            ++decays;
            stalls = 0;
        }
    }
    Provenance prov = model.provenance();
    prov.training_set = set_id;
    prov.training_seed = config.seed;
    result.model = Model(model.spec(), std::move(best), std::move(prov));
    return result;
}

TrainResult pretrain(const ArchSpec& spec, const Dataset& source, const SubsetSplit& subset, const TrainConfig& config,
                     std::uint64_t init_seed) {
    ArchSpec s = spec;
    s.arity = static_cast<std::uint32_t>(source.arity);
    TrainConfig c = config;
    // source shapes are only ever drawn in one orientation
    c.class_balancing = false;
    c.augment = kAugmentNone;
    auto r = train(build(s, init_seed), source, subset, c, "source");
    Provenance p = r.model.provenance();
    p.is_source = true;
    r.model = r.model.with_provenance(std::move(p));
    return r;
}

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw TrainingError("cannot write training history " + path.string());
    out << "epoch,train_loss,val_loss,val_auc,lr\n";
    out.precision(17);
    for (const auto& r : history)
        out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_auc << ',' << r.lr << '\n';
}

}  // namespace tl
