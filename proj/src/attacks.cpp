#include "transferlab/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "transferlab/loss.hpp"
#include "transferlab/rng.hpp"

namespace tl {

const char* to_string(Method m) { return m == Method::FGSM ? "fgsm" : "pgd"; }

Method parse_method(const std::string& s) {
    if (s == "fgsm" || s == "FGSM") return Method::FGSM;
    if (s == "pgd" || s == "PGD") return Method::PGD;
    throw AttackError("unknown attack method '" + s + "' (expected fgsm or pgd)");
}

void AttackConfig::validate() const {
    if (!(epsilon >= 0.0 && epsilon <= 2.0)) throw AttackError("attack: epsilon must lie in [0, 2]");
    if (!(alpha > 0.0)) throw AttackError("attack: alpha must be positive");
    if (iterations == 0) throw AttackError("attack: iterations must be >= 1");
}

double AdversarialBatch::mean_ssim() const {
    if (ssim.empty()) return 0.0;
    double s = 0.0;
    for (double v : ssim) s += v;
    return s / static_cast<double>(ssim.size());
}

namespace {

Tensor<float> rows(const Tensor<float>& t, std::size_t b, std::size_t e) {
    Shape s = t.shape();
    s[0] = e - b;
    const std::size_t per = t.sample_size();
    return Tensor<float>(std::move(s), std::vector<float>(t.values().begin() + static_cast<std::ptrdiff_t>(b * per),
                                                          t.values().begin() + static_cast<std::ptrdiff_t>(e * per)));
}

float sign(float g) { return g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f); }

float clip_range(float v, bool on) { return on ? std::clamp(v, -1.0f, 1.0f) : v; }

void check_labels(const Graph<float>& graph, const Tensor<float>& images, const Tensor<float>& labels) {
    if (labels.rank() != 2 || labels.batch() != images.batch() || labels.dim(1) != graph.output_shape()[0]) {
        throw AttackError("attack: labels " + to_string(labels.shape()) + " do not match " +
                          std::to_string(images.batch()) + " samples of arity " + std::to_string(graph.output_shape()[0]));
    }
}

}  // namespace

Tensor<float> loss_input_gradient(Graph<float>& graph, const Tensor<float>& images, const Tensor<float>& labels) {
    check_labels(graph, images, labels);
    const auto loss = bce_loss(graph.forward(images), labels, OutputReduction::Sum);
    graph.backward(loss.grad, false, true);
    Tensor<float> grad(images.shape(), std::vector<float>(graph.input_grad().values().begin(), graph.input_grad().values().end()));
    const std::size_t per = grad.sample_size();
    for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!std::isfinite(grad[i])) throw AttackError("attack: non-finite input gradient for sample " + std::to_string(i / per));
    }
    return grad;
}

Tensor<float> fgsm(Graph<float>& graph, const Tensor<float>& images, const Tensor<float>& labels, double epsilon,
                   bool range_clip, std::vector<float>* step) {
    const auto grad = loss_input_gradient(graph, images, labels);
    const float eps = static_cast<float>(epsilon);
    Tensor<float> out = images;
    if (step) step->resize(images.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const float d = eps * sign(grad[i]);
        if (step) (*step)[i] = d;
        out[i] = clip_range(images[i] + d, range_clip);
    }
    return out;
}

Tensor<float> pgd(Graph<float>& graph, const Tensor<float>& images, const Tensor<float>& labels, double epsilon,
                  double alpha, std::size_t iterations, bool range_clip) {
    const float eps = static_cast<float>(epsilon);
    const float a = static_cast<float>(alpha);
    Tensor<float> x = images;
    for (std::size_t it = 0; it < iterations; ++it) {
        const auto grad = loss_input_gradient(graph, x, labels);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const float moved = x[i] + a * sign(grad[i]);
            x[i] = clip_range(std::clamp(moved, images[i] - eps, images[i] + eps), range_clip);
        }
    }
    return x;
}

std::vector<float> shuffle_control(std::span<const float> perturbation, std::size_t image_size, std::uint64_t seed) {
    if (image_size == 0 || perturbation.size() % image_size != 0)
        throw AttackError("shuffle_control: perturbation is not a whole number of images");
    std::vector<float> out(perturbation.begin(), perturbation.end());
    for (std::size_t n = 0; n < out.size() / image_size; ++n) {
        Rng rng(derive_seed(seed, n));
        std::shuffle(out.begin() + static_cast<std::ptrdiff_t>(n * image_size),
                     out.begin() + static_cast<std::ptrdiff_t>((n + 1) * image_size), rng);
    }
    return out;
}

void rebuild_control(AdversarialBatch& b, std::uint64_t seed, bool range_clip) {
    const auto shuffled = shuffle_control(b.perturbation.values(), b.original.sample_size(), seed);
    b.control = Tensor<float>(b.original.shape());
    for (std::size_t i = 0; i < b.original.size(); ++i) b.control[i] = clip_range(b.original[i] + shuffled[i], range_clip);
}

AdversarialBatch craft(const Model& surrogate, const Tensor<float>& images, const Tensor<float>& labels,
                       const AttackConfig& config, std::size_t chunk) {
    config.validate();
    if (images.rank() != 4) throw AttackError("craft: images must be N x C x H x W, got " + to_string(images.shape()));
    if (chunk == 0) chunk = images.batch();
    auto graph = surrogate.graph();
    if (images.sample_shape() != graph.input_shape()) {
        throw AttackError("craft: surrogate expects " + to_string(graph.input_shape()) + ", images are " +
                          to_string(images.sample_shape()));
    }
    check_labels(graph, images, labels);

    AdversarialBatch b;
    b.original = images;
    b.adversarial = Tensor<float>(images.shape());
    const std::size_t per = images.sample_size();
    for (std::size_t s = 0; s < images.batch(); s += chunk) {
        const std::size_t e = std::min(images.batch(), s + chunk);
        const auto x = rows(images, s, e);
        const auto y = rows(labels, s, e);
        Tensor<float> adv;
        if (config.method == Method::FGSM) {
            std::vector<float> step;
            adv = fgsm(graph, x, y, config.epsilon, config.range_clip, &step);
            b.step.insert(b.step.end(), step.begin(), step.end());
        } else {
            adv = pgd(graph, x, y, config.epsilon, config.alpha, config.iterations, config.range_clip);
        }
        std::copy(adv.values().begin(), adv.values().end(), b.adversarial.data() + s * per);
    }

    b.perturbation = Tensor<float>(images.shape());
    for (std::size_t i = 0; i < images.size(); ++i) b.perturbation[i] = b.adversarial[i] - images[i];
    rebuild_control(b, config.shuffle_seed, config.range_clip);

    const std::size_t h = images.dim(2), w = images.dim(3), planes = images.dim(1);
    b.ssim.resize(images.batch());
    for (std::size_t n = 0; n < images.batch(); ++n) {
        double s = 0.0;
        for (std::size_t c = 0; c < planes; ++c) {
            const std::size_t off = n * per + c * h * w;
            s += ssim(b.original.values().subspan(off, h * w), b.adversarial.values().subspan(off, h * w), h, w);
        }
        b.ssim[n] = s / static_cast<double>(planes);
    }
    return b;
}

Tensor<float> TargetEvaluator::scores(const Tensor<float>& images) {
    ++calls_;
    auto graph = target_.graph();
    if (images.sample_shape() != graph.input_shape()) {
        throw AttackError("target expects " + to_string(graph.input_shape()) + ", images are " +
                          to_string(images.sample_shape()));
    }
    const std::size_t n = images.batch(), arity = target_.spec().arity;
    Tensor<float> out({n, arity});
    for (std::size_t s = 0; s < n; s += 256) {
        const std::size_t e = std::min(n, s + 256);
        const auto& p = graph.forward(rows(images, s, e));
        std::copy(p.values().begin(), p.values().end(), out.data() + s * arity);
    }
    return out;
}

Shape TargetEvaluator::input_shape() const { return target_.graph().input_shape(); }

double score_auc(const Tensor<float>& scores, const Tensor<float>& labels) {
    if (scores.shape() != labels.shape()) throw MetricError("score_auc: score and label shapes differ");
    if (scores.sample_size() == 1) return auc(scores.values(), labels.values());
    return mean_auc(scores.values(), labels.values(), scores.sample_size()).value;
}

TransferResult evaluate_transfer(const AdversarialBatch& batch, const Tensor<float>& labels, TargetEvaluator& target) {
    if (batch.original.sample_shape() != target.input_shape()) {
        throw AttackError("transfer: target expects " + to_string(target.input_shape()) + ", batch holds " +
                          to_string(batch.original.sample_shape()));
    }
    const std::size_t before = target.invocations();
    TransferResult r;
    r.clean_scores = target.scores(batch.original);
    r.adversarial_scores = target.scores(batch.adversarial);
    r.control_scores = target.scores(batch.control);
    r.evaluator_calls = target.invocations() - before;
    r.clean_auc = score_auc(r.clean_scores, labels);
    r.adversarial_auc = score_auc(r.adversarial_scores, labels);
    r.control_auc = score_auc(r.control_scores, labels);
    return r;
}

TransferAttack transfer_attack(const Model& surrogate, TargetEvaluator& target, const Tensor<float>& images,
                               const Tensor<float>& labels, const AttackConfig& config) {
    if (images.sample_shape() != target.input_shape()) {
        throw AttackError("transfer: surrogate and target disagree on input shape (" + to_string(images.sample_shape()) +
                          " vs " + to_string(target.input_shape()) + ")");
    }
    TransferAttack t;
    const std::size_t before = target.invocations();
    t.batch = craft(surrogate, images, labels, config);
    t.calls_during_crafting = target.invocations() - before;
    t.result = evaluate_transfer(t.batch, labels, target);
    return t;
}

InvariantReport& InvariantReport::operator+=(const InvariantReport& o) {
    linf += o.linf;
    range += o.range;
    fgsm_step += o.fgsm_step;
    control += o.control;
    batches += o.batches;
    return *this;
}

std::string InvariantReport::describe() const {
    std::ostringstream os;
    os << batches << " batches: " << linf << " L-inf, " << range << " range, " << fgsm_step << " FGSM step, " << control
       << " control-noise violations";
    return os.str();
}

InvariantReport check_invariants(const AdversarialBatch& b, const AttackConfig& config) {
    InvariantReport r;
    r.batches = 1;
    auto ulp = [](float v) {
        const float a = std::abs(v);
        return static_cast<double>(std::nextafter(a, std::numeric_limits<float>::infinity()) - a);
    };
    // the budget as the attack sees it: float(eps) may round up
    const double budget = std::max(config.epsilon, static_cast<double>(static_cast<float>(config.epsilon)));
    for (std::size_t i = 0; i < b.original.size(); ++i) {
        const float x = b.original[i], a = b.adversarial[i], c = b.control[i];
        const double dev = std::abs(static_cast<double>(a) - static_cast<double>(x));
        if (!(dev <= budget + ulp(std::max(std::abs(x), std::abs(a))))) ++r.linf;
        if (config.range_clip && !(a >= -1.0f && a <= 1.0f && c >= -1.0f && c <= 1.0f)) ++r.range;
    }
    if (config.method == Method::FGSM) {
        const float eps = static_cast<float>(config.epsilon);
        if (b.step.size() != b.original.size()) {
            r.fgsm_step += b.original.size();
        } else {
            for (float d : b.step)
                if (d != eps && d != -eps && d != 0.0f) ++r.fgsm_step;
        }
    }
    const std::size_t per = b.original.sample_size();
    const auto shuffled = shuffle_control(b.perturbation.values(), per, config.shuffle_seed);
    for (std::size_t n = 0; n < b.original.batch(); ++n) {
        std::vector<float> p(b.perturbation.data() + n * per, b.perturbation.data() + (n + 1) * per);
        std::vector<float> q(shuffled.begin() + static_cast<std::ptrdiff_t>(n * per),
                             shuffled.begin() + static_cast<std::ptrdiff_t>((n + 1) * per));
        std::sort(p.begin(), p.end());
        std::sort(q.begin(), q.end());
        bool rebuilt = true;
        for (std::size_t k = 0; k < per && rebuilt; ++k) {
            const std::size_t i = n * per + k;
            rebuilt = b.control[i] == clip_range(b.original[i] + shuffled[i], config.range_clip);
        }
        if (p != q || !rebuilt) ++r.control;
    }
    return r;
}

double batch_loss(const Model& model, const Tensor<float>& images, const Tensor<float>& labels) {
    auto g = model.graph();
    double total = 0.0;
    for (std::size_t s = 0; s < images.batch(); s += 256) {
        const std::size_t e = std::min(images.batch(), s + 256);
        total += bce_loss(g.forward(rows(images, s, e)), rows(labels, s, e)).value * static_cast<double>(e - s);
    }
    return total / static_cast<double>(images.batch());
}

void write_pgm(const std::filesystem::path& path, std::span<const float> image, std::size_t height, std::size_t width,
               double lo, double hi) {
    if (image.size() != height * width) throw AttackError("pgm: image does not match " + std::to_string(height) + "x" + std::to_string(width));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw AttackError("cannot write " + path.string());
    out << "P5\n" << width << ' ' << height << "\n255\n";
    for (float v : image) {
        const double t = std::clamp((static_cast<double>(v) - lo) / (hi - lo), 0.0, 1.0);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
    }
}

void dump_images(const std::filesystem::path& dir, const AdversarialBatch& batch, std::size_t index, double epsilon) {
    std::filesystem::create_directories(dir);
    const std::size_t h = batch.original.dim(2), w = batch.original.dim(3);
    const std::string stem = "img" + std::to_string(index);
    write_pgm(dir / (stem + "_original.pgm"), batch.original.sample(index).first(h * w), h, w);
    write_pgm(dir / (stem + "_adversarial.pgm"), batch.adversarial.sample(index).first(h * w), h, w);
    write_pgm(dir / (stem + "_control.pgm"), batch.control.sample(index).first(h * w), h, w);
    const double e = epsilon > 0.0 ? epsilon : 1.0;
    write_pgm(dir / (stem + "_noise.pgm"), batch.perturbation.sample(index).first(h * w), h, w, -e, e);
}

}  // namespace tl
