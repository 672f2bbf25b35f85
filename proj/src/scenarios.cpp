#include "transferlab/scenarios.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <set>
#include <sstream>

#include "transferlab/rng.hpp"

namespace tl {

using nlohmann::json;

// ---------------------------------------------------------------- config

ArchSpec ExperimentConfig::arch(Family f) const {
    ArchSpec s = f == Family::ArchA ? arch_a : arch_b;
    s.family = f;
    s.arity = static_cast<std::uint32_t>(target_arity);
    return s;
}

void ExperimentConfig::validate() const {
    if (target_samples < 100 || source_samples < 100) throw ScenarioError("config: sample counts must be >= 100");
    if (target_arity == 0 || target_arity > kMaxTargetArity)
        throw ScenarioError("config: target_arity must be in [1, " + std::to_string(kMaxTargetArity) + "]");
    if (!(source_validation > 0.0 && source_validation < 1.0)) throw ScenarioError("config: source_validation must lie in (0, 1)");
    if (families.empty() || methods.empty() || epsilons.empty())
        throw ScenarioError("config: families, methods and epsilons must be non-empty");
    if (jobs == 0) throw ScenarioError("config: jobs must be >= 1");
    try {
        ratios.validate();
        train.validate();
        source_train.validate();
        arch(Family::ArchA).validate();
        arch(Family::ArchB).validate();
        AttackConfig probe;
        probe.alpha = alpha;
        probe.iterations = iterations;
        probe.epsilon = epsilon;
        probe.validate();
        for (double e : epsilons) {
            probe.epsilon = e;
            probe.validate();
        }
    } catch (const std::exception& e) {
        throw ScenarioError(std::string("config: ") + e.what());
    }
}

namespace {

json augment_json(unsigned mask) {
    json a = json::array();
    if (mask & kAugmentHFlip) a.push_back("hflip");
    if (mask & kAugmentVFlip) a.push_back("vflip");
    if (mask & kAugmentRot90) a.push_back("rot90");
    return a;
}

json train_json(const TrainConfig& t) {
    return {{"batch_size", t.batch_size},         {"lr", t.lr},
            {"beta1", t.beta1},                   {"beta2", t.beta2},
            {"eps", t.eps},                       {"decay_factor", t.decay_factor},
            {"decay_patience", t.decay_patience}, {"stop_after_decays", t.stop_after_decays},
            {"max_epochs", t.max_epochs},         {"class_balancing", t.class_balancing},
            {"augment", augment_json(t.augment)}};
}

json arch_json(const ArchSpec& a) {
    return {{"stem", a.stem}, {"width_knob", a.width_knob}, {"blocks", a.blocks}, {"layers", a.layers}};
}

// Walks a JSON object, rejecting keys that no handler claims.
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ScenarioError("config: '" + where() + "' must be an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ScenarioError("config: wrong type for '" + sub(key) + "'");
        }
    }

    template <class F>
    void object(const char* key, F&& f) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        Reader r(j_.at(key), sub(key));
        f(r);
        r.finish();
    }

    template <class F>
    void list(const char* key, F&& f) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        const json& a = j_.at(key);
        if (!a.is_array()) throw ScenarioError("config: '" + sub(key) + "' must be an array");
        for (const auto& v : a) {
            try {
                f(v);
            } catch (const json::exception&) {
                throw ScenarioError("config: wrong element type in '" + sub(key) + "'");
            } catch (const std::exception& e) {
                throw ScenarioError("config: '" + sub(key) + "': " + e.what());
            }
        }
    }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) throw ScenarioError("config: unknown key '" + sub(k.c_str()) + "'");
        }
    }

    std::string where() const { return path_.empty() ? "<root>" : path_; }

private:
    std::string sub(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_train(Reader& r, TrainConfig& t) {
    r.get("batch_size", t.batch_size);
    r.get("lr", t.lr);
    r.get("beta1", t.beta1);
    r.get("beta2", t.beta2);
    r.get("eps", t.eps);
    r.get("decay_factor", t.decay_factor);
    r.get("decay_patience", t.decay_patience);
    r.get("stop_after_decays", t.stop_after_decays);
    r.get("max_epochs", t.max_epochs);
    r.get("class_balancing", t.class_balancing);
    bool listed = false;
    unsigned mask = 0;
    r.list("augment", [&](const json& v) {
        listed = true;
        const auto s = v.get<std::string>();
        if (s == "hflip") mask |= kAugmentHFlip;
        else if (s == "vflip") mask |= kAugmentVFlip;
        else if (s == "rot90") mask |= kAugmentRot90;
        else throw std::invalid_argument("unknown augmentation '" + s + "'");
    });
    if (listed) t.augment = mask;
}

void read_arch(Reader& r, ArchSpec& a) {
    r.get("stem", a.stem);
    r.get("width_knob", a.width_knob);
    r.get("blocks", a.blocks);
    r.get("layers", a.layers);
}

}  // namespace

json to_json(const ExperimentConfig& c) {
    json fam = json::array(), meth = json::array();
    for (auto f : c.families) fam.push_back(to_string(f));
    for (auto m : c.methods) meth.push_back(to_string(m));
    const auto& s = c.synthetic;
    return {{"master_seed", c.master_seed},
            {"target_samples", c.target_samples},
            {"source_samples", c.source_samples},
            {"target_arity", c.target_arity},
            {"synthetic",
             {{"noise_sigma", s.noise_sigma},
              {"group_share", s.group_share},
              {"amplitude_lo", s.amplitude_lo},
              {"amplitude_hi", s.amplitude_hi},
              {"bar_length", s.bar_length},
              {"distractors", s.distractors},
              {"group_min", s.group_min},
              {"group_max", s.group_max}}},
            {"ratios",
             {{"test", c.ratios.test},
              {"validation", c.ratios.validation},
              {"d2_half", c.ratios.d2_half},
              {"d1_tenth", c.ratios.d1_tenth}}},
            {"source_validation", c.source_validation},
            {"train", train_json(c.train)},
            {"source_train", train_json(c.source_train)},
            {"arch_a", arch_json(c.arch_a)},
            {"arch_b", arch_json(c.arch_b)},
            {"families", fam},
            {"methods", meth},
            {"epsilons", c.epsilons},
            {"epsilon", c.epsilon},
            {"alpha", c.alpha},
            {"iterations", c.iterations},
            {"range_clip", c.range_clip},
            {"whitebox", c.whitebox},
            {"jobs", c.jobs},
            {"record_timing", c.record_timing}};
}

ExperimentConfig experiment_config_from_json(const json& j, ExperimentConfig c) {
    Reader r(j, "");
    r.get("master_seed", c.master_seed);
    r.get("target_samples", c.target_samples);
    r.get("source_samples", c.source_samples);
    r.get("target_arity", c.target_arity);
    r.object("synthetic", [&](Reader& s) {
        s.get("noise_sigma", c.synthetic.noise_sigma);
        s.get("group_share", c.synthetic.group_share);
        s.get("amplitude_lo", c.synthetic.amplitude_lo);
        s.get("amplitude_hi", c.synthetic.amplitude_hi);
        s.get("bar_length", c.synthetic.bar_length);
        s.get("distractors", c.synthetic.distractors);
        s.get("group_min", c.synthetic.group_min);
        s.get("group_max", c.synthetic.group_max);
    });
    r.object("ratios", [&](Reader& s) {
        s.get("test", c.ratios.test);
        s.get("validation", c.ratios.validation);
        s.get("d2_half", c.ratios.d2_half);
        s.get("d1_tenth", c.ratios.d1_tenth);
    });
    r.get("source_validation", c.source_validation);
    r.object("train", [&](Reader& s) { read_train(s, c.train); });
    r.object("source_train", [&](Reader& s) { read_train(s, c.source_train); });
    r.object("arch_a", [&](Reader& s) { read_arch(s, c.arch_a); });
    r.object("arch_b", [&](Reader& s) { read_arch(s, c.arch_b); });
    std::vector<Family> fams;
    std::vector<Method> meths;
    std::vector<double> eps;
    r.list("families", [&](const json& v) {
        fams.push_back(parse_family(v.get<std::string>()));
    });
    r.list("methods", [&](const json& v) {
        meths.push_back(parse_method(v.get<std::string>()));
    });
    r.list("epsilons", [&](const json& v) {
        eps.push_back(v.get<double>());
    });
    auto listed = [&j](const char* key) { return j.is_object() && j.contains(key); };
    if (listed("families")) c.families = fams;
    if (listed("methods")) c.methods = meths;
    if (listed("epsilons")) c.epsilons = eps;
    r.get("epsilon", c.epsilon);
    r.get("alpha", c.alpha);
    r.get("iterations", c.iterations);
    r.get("range_clip", c.range_clip);
    r.get("whitebox", c.whitebox);
    r.get("jobs", c.jobs);
    r.get("record_timing", c.record_timing);
    r.finish();
    return c;
}

namespace {

std::string hex16(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace

std::string config_hash(const ExperimentConfig& c) {
    json j = to_json(c);
    j.erase("jobs");  // parallelism never changes results
    return hex16(fnv1a(j.dump()));
}

// ---------------------------------------------------------------- zoo

std::string ModelRef::id() const {
    return std::string(to_string(family)) + "/" + to_string(init) + "/" + set + "/" + std::to_string(instance);
}

std::string ModelRef::file_stem() const {
    std::string s = id();
    std::replace(s.begin(), s.end(), '/', '-');
    return s;
}

namespace {

template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F&& f) {
    std::vector<std::exception_ptr> errors(n);
    const int threads = static_cast<int>(std::max<std::size_t>(1, std::min(jobs, std::max<std::size_t>(n, 1))));
#pragma omp parallel for num_threads(threads) schedule(dynamic, 1)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
        try {
            f(static_cast<std::size_t>(i));
        } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

std::string source_id(Family f) { return std::string(to_string(f)) + "/source"; }

}  // namespace

ModelZoo::ModelZoo(const ExperimentConfig& config, Dataset target, Dataset source)
    : config_(config), target_(std::move(target)), source_(std::move(source)) {
    config_.validate();
    target_.validate();
    source_.validate();
    if (target_.arity != config_.target_arity) {
        throw ScenarioError("zoo: target data has arity " + std::to_string(target_.arity) + ", config says " +
                            std::to_string(config_.target_arity));
    }
    if (source_.height != target_.height || source_.width != target_.width)
        throw ScenarioError("zoo: source and target images differ in size");
    for (Family f : {Family::ArchA, Family::ArchB}) {
        auto& a = f == Family::ArchA ? config_.arch_a : config_.arch_b;
        a.height = static_cast<std::uint32_t>(target_.height);
        a.width = static_cast<std::uint32_t>(target_.width);
    }
    partition_ = split(target_, config_.ratios, derive_seed(config_.master_seed, "partition"));
    source_split_ = holdout(source_, config_.source_validation, derive_seed(config_.master_seed, "source-split"));
}

ModelZoo ModelZoo::synthetic(const ExperimentConfig& c) {
    c.validate();
    return ModelZoo(c,
                    generate_target_task(c.target_samples, derive_seed(c.master_seed, "target-data"), c.target_arity,
                                         c.synthetic),
                    generate_source_task(c.source_samples, derive_seed(c.master_seed, "source-data"), c.synthetic));
}

std::uint64_t ModelZoo::init_seed(const ModelRef& ref) const { return derive_seed(config_.master_seed, "init/" + ref.id()); }

std::uint64_t ModelZoo::training_seed(const ModelRef& ref) const {
    return derive_seed(config_.master_seed, "train/" + ref.id());
}

const Model& ModelZoo::model(const ModelRef& ref) const {
    auto it = models_.find(ref);
    if (it == models_.end()) throw ScenarioError("zoo: model " + ref.id() + " has not been prepared");
    return it->second;
}

const Model& ModelZoo::source(Family f) const {
    auto it = sources_.find(f);
    if (it == sources_.end()) throw ScenarioError("zoo: source checkpoint for family " + std::string(to_string(f)) + " missing");
    return it->second;
}

void ModelZoo::require_sources(const std::vector<Family>& families) {
    std::vector<Family> todo;
    for (Family f : families) {
        if (sources_.count(f)) continue;
        if (checkpoint_dir_) {
            const auto path = *checkpoint_dir_ / (std::string(to_string(f)) + "-source.tlck");
            if (std::filesystem::exists(path)) {
                sources_.emplace(f, load_checkpoint(path));
                continue;
            }
        }
        if (!auto_train_) throw ScenarioError("zoo: source checkpoint " + source_id(f) + " is missing and auto-train is off");
        todo.push_back(f);
    }
    std::vector<std::optional<TrainResult>> out(todo.size());
    parallel_for(todo.size(), config_.jobs, [&](std::size_t i) {
        const Family f = todo[i];
        ArchSpec spec = config_.arch(f);
        TrainConfig tc = config_.source_train;
        tc.seed = derive_seed(config_.master_seed, "train/" + source_id(f));
        out[i] = pretrain(spec, source_, source_split_, tc, derive_seed(config_.master_seed, "init/" + source_id(f)));
    });
    for (std::size_t i = 0; i < todo.size(); ++i) {
        if (checkpoint_dir_) {
            std::filesystem::create_directories(*checkpoint_dir_);
            save_checkpoint(out[i]->model, *checkpoint_dir_ / (std::string(to_string(todo[i])) + "-source.tlck"));
        }
        sources_.emplace(todo[i], std::move(out[i]->model));
    }
}

void ModelZoo::require(const std::vector<ModelRef>& refs) {
    std::set<ModelRef> wanted(refs.begin(), refs.end());
    std::vector<ModelRef> todo;
    std::vector<Family> pretrained;
    for (const auto& ref : wanted) {
        if (models_.count(ref)) continue;
        (void)canonical_subset_name(ref.set);
        if (checkpoint_dir_) {
            const auto path = *checkpoint_dir_ / (ref.file_stem() + ".tlck");
            if (std::filesystem::exists(path)) {
                Model m = load_checkpoint(path);
                if (!(m.spec() == config_.arch(ref.family))) {
                    throw ScenarioError("zoo: checkpoint " + path.string() + " does not match the configured architecture");
                }
                models_.emplace(ref, std::move(m));
                continue;
            }
        }
        if (!auto_train_) {
            throw ScenarioError("zoo: model " + ref.id() + " is missing and auto-train is off" +
                                (checkpoint_dir_ ? " (looked in " + checkpoint_dir_->string() + ")" : std::string()));
        }
        todo.push_back(ref);
        if (ref.init == InitMode::Pretrained &&
            std::find(pretrained.begin(), pretrained.end(), ref.family) == pretrained.end())
            pretrained.push_back(ref.family);
    }
    require_sources(pretrained);
    std::vector<std::optional<TrainResult>> out(todo.size());
    parallel_for(todo.size(), config_.jobs, [&](std::size_t i) {
        const ModelRef& ref = todo[i];
        const ArchSpec spec = config_.arch(ref.family);
        Model init = ref.init == InitMode::Random ? build(spec, init_seed(ref))
                                                  : load_pretrained(spec, source(ref.family), init_seed(ref));
        TrainConfig tc = config_.train;
        tc.seed = training_seed(ref);
        const std::string set = canonical_subset_name(ref.set);
        out[i] = train(init, target_, partition_.subset(set), tc, set);
    });
    for (std::size_t i = 0; i < todo.size(); ++i) {
        if (checkpoint_dir_) {
            std::filesystem::create_directories(*checkpoint_dir_);
            save_checkpoint(out[i]->model, *checkpoint_dir_ / (todo[i].file_stem() + ".tlck"));
        }
        histories_[todo[i]] = out[i]->history;
        models_.emplace(todo[i], std::move(out[i]->model));
    }
}

// ---------------------------------------------------------------- cells

std::string format_number(double v) {
    if (v == 0.0) return "0";
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string ScenarioCell::id() const {
    std::ostringstream os;
    os << experiment << '|' << target.id() << '|' << surrogate.id() << '|' << to_string(attack.method) << '|'
       << format_number(attack.epsilon) << '|' << format_number(attack.alpha) << '|' << attack.iterations << '|'
       << attack.range_clip << '|' << eval_set << '|' << replicate_seed;
    return hex16(fnv1a(os.str()));
}

int relative_percent(double adv_auc, double clean_auc) {
    if (!(clean_auc > 0.0)) return 0;
    return static_cast<int>(std::lround(100.0 * adv_auc / clean_auc));
}

namespace {

ScenarioCell make_cell(const ExperimentConfig& c, std::string experiment, ModelRef target, ModelRef surrogate,
                       Method m, double eps) {
    ScenarioCell cell;
    cell.experiment = std::move(experiment);
    cell.target = std::move(target);
    cell.surrogate = std::move(surrogate);
    cell.attack.method = m;
    cell.attack.epsilon = eps;
    cell.attack.alpha = c.alpha;
    cell.attack.iterations = c.iterations;
    cell.attack.range_clip = c.range_clip;
    cell.replicate_seed = c.master_seed;
    cell.attack.shuffle_seed = derive_seed(c.master_seed, "control/" + cell.id());
    return cell;
}

}  // namespace

std::vector<ScenarioCell> sweep_cells(const ExperimentConfig& c) {
    std::vector<ScenarioCell> cells;
    for (Family f : c.families) {
        const ModelRef target{f, InitMode::Random, "d1", 1};
        const ModelRef surrogate{f, InitMode::Random, "d1", 2};
        for (Method m : c.methods) {
            for (double e : c.epsilons) cells.push_back(make_cell(c, "sweep", target, surrogate, m, e));
            if (c.whitebox) cells.push_back(make_cell(c, "whitebox", target, target, m, c.epsilon));
        }
    }
    return cells;
}

std::vector<ScenarioCell> pretraining_cells(const ExperimentConfig& c) {
    std::vector<ScenarioCell> cells;
    for (Family ft : c.families)
        for (Family fs : c.families)
            for (InitMode it : {InitMode::Random, InitMode::Pretrained})
                for (InitMode is : {InitMode::Random, InitMode::Pretrained})
                    for (Method m : c.methods)
                        cells.push_back(make_cell(c, "pretraining", {ft, it, "d1", 1}, {fs, is, "d1", 2}, m, c.epsilon));
    return cells;
}

std::vector<ScenarioCell> disparity_cells(const ExperimentConfig& c) {
    std::vector<ScenarioCell> cells;
    for (Family ft : c.families)
        for (Family fs : c.families)
            for (const char* set : {"d1", "d2", "d2_half"})
                for (Method m : c.methods) {
                    const int instance = std::string(set) == "d1" ? 2 : 1;
                    cells.push_back(make_cell(c, "disparity", {ft, InitMode::Random, "d1", 1},
                                              {fs, InitMode::Random, set, instance}, m, c.epsilon));
                }
    return cells;
}

std::vector<ScenarioCell> small_target_cells(const ExperimentConfig& c) {
    std::vector<ScenarioCell> cells;
    for (Family ft : c.families)
        for (Family fs : c.families)
            for (InitMode init : {InitMode::Random, InitMode::Pretrained})
                for (Method m : c.methods)
                    cells.push_back(make_cell(c, "small-target", {ft, init, "d1_tenth", 1}, {fs, init, "d2", 1}, m, c.epsilon));
    return cells;
}

// ---------------------------------------------------------------- running

std::string RunAudit::describe() const {
    std::ostringstream os;
    os << cells << " cells; invariants: " << invariants.describe() << "; cells with target calls != 3: "
       << cells_with_wrong_call_count << "; target calls during crafting: " << calls_during_crafting
       << "; white-box batches: " << whitebox_batches << " (PGD loss < FGSM loss in " << whitebox_loss_violations << ")";
    return os.str();
}

json RunAudit::to_json() const {
    return {{"cells", cells},
            {"batches_checked", invariants.batches},
            {"linf_violations", invariants.linf},
            {"range_violations", invariants.range},
            {"fgsm_step_violations", invariants.fgsm_step},
            {"control_violations", invariants.control},
            {"cells_with_wrong_call_count", cells_with_wrong_call_count},
            {"calls_during_crafting", calls_during_crafting},
            {"whitebox_batches", whitebox_batches},
            {"whitebox_loss_violations", whitebox_loss_violations},
            {"ok", ok()}};
}

namespace {

struct CraftKey {
    ModelRef surrogate;
    Method method;
    double epsilon;
    friend auto operator<=>(const CraftKey&, const CraftKey&) = default;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string eps_tag(double e) { return format_number(e); }

}  // namespace

ExperimentResult run_cells(ModelZoo& zoo, const std::vector<ScenarioCell>& cells, const std::filesystem::path* pgm_dir) {
    const ExperimentConfig& cfg = zoo.config();
    std::vector<ModelRef> needed;
    for (const auto& c : cells) {
        needed.push_back(c.target);
        needed.push_back(c.surrogate);
    }
    zoo.require(needed);

    const auto& test = zoo.partition().test;
    const auto images = zoo.target_data().images(test);
    const auto labels = zoo.target_data().label_tensor(test);

    // Every target's evaluator exists before crafting starts, so any query
    // made while crafting would show up in its counter.
    std::vector<std::unique_ptr<TargetEvaluator>> evaluators;
    evaluators.reserve(cells.size());
    for (const auto& c : cells) evaluators.push_back(std::make_unique<TargetEvaluator>(zoo.model(c.target)));

    std::vector<CraftKey> keys;
    std::map<CraftKey, std::size_t> key_index;
    std::vector<std::size_t> cell_key(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const CraftKey k{cells[i].surrogate, cells[i].attack.method, cells[i].attack.epsilon};
        auto [it, fresh] = key_index.emplace(k, keys.size());
        if (fresh) keys.push_back(k);
        cell_key[i] = it->second;
    }

    std::vector<AdversarialBatch> batches(keys.size());
    std::vector<double> craft_seconds(keys.size(), 0.0);
    parallel_for(keys.size(), cfg.jobs, [&](std::size_t i) {
        const auto t0 = std::chrono::steady_clock::now();
        AttackConfig a;
        a.method = keys[i].method;
        a.epsilon = keys[i].epsilon;
        a.alpha = cfg.alpha;
        a.iterations = cfg.iterations;
        a.range_clip = cfg.range_clip;
        batches[i] = craft(zoo.model(keys[i].surrogate), images, labels, a);
        craft_seconds[i] = seconds_since(t0);
    });

    ExperimentResult result;
    for (const auto& ev : evaluators) result.audit.calls_during_crafting += ev->invocations();

    if (pgm_dir) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (cells[i].experiment != "sweep") continue;
            const auto& k = keys[cell_key[i]];
            const auto dir = *pgm_dir / (k.surrogate.file_stem() + "-" + to_string(k.method) + "-eps" + eps_tag(k.epsilon));
            if (std::filesystem::exists(dir)) continue;
            for (std::size_t n = 0; n < std::min<std::size_t>(2, images.batch()); ++n)
                dump_images(dir, batches[cell_key[i]], n, k.epsilon);
        }
    }

    std::vector<ReportRow> rows(cells.size());
    std::vector<InvariantReport> checks(cells.size());
    std::vector<std::size_t> calls(cells.size());
    parallel_for(cells.size(), cfg.jobs, [&](std::size_t i) {
        const auto t0 = std::chrono::steady_clock::now();
        const ScenarioCell& c = cells[i];
        AdversarialBatch b = batches[cell_key[i]];
        rebuild_control(b, c.attack.shuffle_seed, c.attack.range_clip);
        checks[i] = check_invariants(b, c.attack);
        const auto r = evaluate_transfer(b, labels, *evaluators[i]);
        calls[i] = r.evaluator_calls;
        ReportRow& row = rows[i];
        row.cell_id = c.id();
        row.experiment = c.experiment;
        row.target_family = to_string(c.target.family);
        row.target_init = to_string(c.target.init);
        row.target_set = c.target.set;
        row.surrogate_family = to_string(c.surrogate.family);
        row.surrogate_init = to_string(c.surrogate.init);
        row.surrogate_set = c.surrogate.set;
        row.method = to_string(c.attack.method);
        row.epsilon = c.attack.epsilon;
        row.alpha = c.attack.method == Method::FGSM ? c.attack.epsilon : c.attack.alpha;
        row.iters = c.attack.method == Method::FGSM ? 1 : c.attack.iterations;
        row.clean_auc = r.clean_auc;
        row.adv_auc = r.adversarial_auc;
        row.control_auc = r.control_auc;
        row.relative_pct = relative_percent(r.adversarial_auc, r.clean_auc);
        row.mean_ssim = b.mean_ssim();
        if (cfg.record_timing) row.seconds = seconds_since(t0) + craft_seconds[cell_key[i]];
    });

    for (std::size_t i = 0; i < cells.size(); ++i) {
        result.audit.invariants += checks[i];
        ++result.audit.cells;
        if (calls[i] != 3) ++result.audit.cells_with_wrong_call_count;
    }

    // White-box sanity: on the attacked model itself, PGD should reach at
    // least the loss FGSM reaches, chunk by chunk.
    std::set<std::pair<ModelRef, double>> whitebox;
    for (const auto& c : cells)
        if (c.experiment == "whitebox") whitebox.insert({c.target, c.attack.epsilon});
    for (const auto& [ref, eps] : whitebox) {
        const auto f = key_index.find(CraftKey{ref, Method::FGSM, eps});
        const auto p = key_index.find(CraftKey{ref, Method::PGD, eps});
        if (f == key_index.end() || p == key_index.end()) continue;
        const auto& fb = batches[f->second];
        const auto& pb = batches[p->second];
        const std::size_t per = images.sample_size(), arity = labels.sample_size();
        for (std::size_t s = 0; s < images.batch(); s += 128) {
            const std::size_t e = std::min(images.batch(), s + 128);
            auto slice = [&](const Tensor<float>& t, std::size_t width) {
                Shape sh = t.shape();
                sh[0] = e - s;
                return Tensor<float>(sh, std::vector<float>(t.data() + s * width, t.data() + e * width));
            };
            const auto y = slice(labels, arity);
            const double lf = batch_loss(zoo.model(ref), slice(fb.adversarial, per), y);
            const double lp = batch_loss(zoo.model(ref), slice(pb.adversarial, per), y);
            ++result.audit.whitebox_batches;
            if (lp < lf) ++result.audit.whitebox_loss_violations;
        }
    }

    result.rows = std::move(rows);
    return result;
}

namespace {

std::string parity(const ReportRow& r) { return r.target_family == r.surrogate_family ? "same" : "different"; }

ReportRow mean_of(const std::vector<const ReportRow*>& members, std::string method) {
    ReportRow out = *members.front();
    out.target_family = "*";
    out.surrogate_family = parity(*members.front());
    out.method = std::move(method);
    double clean = 0, adv = 0, control = 0, ssim_sum = 0;
    for (const auto* m : members) {
        clean += m->clean_auc;
        adv += m->adv_auc;
        control += m->control_auc;
        ssim_sum += m->mean_ssim;
    }
    const double n = static_cast<double>(members.size());
    out.clean_auc = clean / n;
    out.adv_auc = adv / n;
    out.control_auc = control / n;
    out.mean_ssim = ssim_sum / n;
    out.relative_pct = relative_percent(out.adv_auc, out.clean_auc);
    out.seconds.reset();
    if (out.method == "mean") {
        out.alpha.reset();
        out.iters.reset();
    }
    std::ostringstream key;
    key << "avg|" << out.experiment << '|' << out.target_init << '|' << out.target_set << '|' << out.surrogate_family << '|'
        << out.surrogate_init << '|' << out.surrogate_set << '|' << out.method << '|' << format_number(out.epsilon);
    out.cell_id = hex16(fnv1a(key.str()));
    return out;
}

}  // namespace

std::vector<ReportRow> average_rows(const std::vector<ReportRow>& rows) {
    using Key = std::tuple<std::string, std::string, std::string, std::string, std::string, std::string, double>;
    std::map<std::pair<Key, std::string>, std::vector<const ReportRow*>> per_method;
    std::map<Key, std::vector<const ReportRow*>> overall;
    for (const auto& r : rows) {
        if (r.averaged()) continue;
        const Key k{r.experiment, r.target_init, r.target_set, parity(r), r.surrogate_init, r.surrogate_set, r.epsilon};
        per_method[{k, r.method}].push_back(&r);
        overall[k].push_back(&r);
    }
    std::vector<ReportRow> out;
    for (const auto& [k, members] : per_method) out.push_back(mean_of(members, k.second));
    for (const auto& [k, members] : overall) out.push_back(mean_of(members, "mean"));
    return out;
}

void sort_rows(std::vector<ReportRow>& rows) {
    std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) { return a.cell_id < b.cell_id; });
}

namespace {

ExperimentResult finish(ExperimentResult r) {
    auto avg = average_rows(r.rows);
    r.rows.insert(r.rows.end(), avg.begin(), avg.end());
    sort_rows(r.rows);
    return r;
}

}  // namespace

ExperimentResult run_epsilon_sweep(ModelZoo& zoo, const std::filesystem::path* pgm_dir) {
    return finish(run_cells(zoo, sweep_cells(zoo.config()), pgm_dir));
}
ExperimentResult run_pretraining_matrix(ModelZoo& zoo) { return finish(run_cells(zoo, pretraining_cells(zoo.config()))); }
ExperimentResult run_data_disparity(ModelZoo& zoo) { return finish(run_cells(zoo, disparity_cells(zoo.config()))); }
ExperimentResult run_small_target(ModelZoo& zoo) { return finish(run_cells(zoo, small_target_cells(zoo.config()))); }

const char* to_string(Experiment e) {
    switch (e) {
        case Experiment::Sweep: return "sweep";
        case Experiment::Pretraining: return "pretraining";
        case Experiment::Disparity: return "disparity";
        case Experiment::SmallTarget: return "small-target";
        case Experiment::All: return "all";
    }
    return "?";
}

Experiment parse_experiment(const std::string& s) {
    for (auto e : {Experiment::Sweep, Experiment::Pretraining, Experiment::Disparity, Experiment::SmallTarget, Experiment::All})
        if (s == to_string(e)) return e;
    throw ScenarioError("unknown experiment '" + s + "' (expected sweep, pretraining, disparity, small-target or all)");
}

ExperimentResult run_experiment(ModelZoo& zoo, Experiment which, const std::filesystem::path* pgm_dir) {
    const auto& c = zoo.config();
    switch (which) {
        case Experiment::Sweep: return run_epsilon_sweep(zoo, pgm_dir);
        case Experiment::Pretraining: return run_pretraining_matrix(zoo);
        case Experiment::Disparity: return run_data_disparity(zoo);
        case Experiment::SmallTarget: return run_small_target(zoo);
        case Experiment::All: break;
    }
    std::vector<ScenarioCell> cells = sweep_cells(c);
    for (auto* make : {&pretraining_cells, &disparity_cells, &small_target_cells}) {
        auto more = make(c);
        cells.insert(cells.end(), more.begin(), more.end());
    }
    return finish(run_cells(zoo, cells, pgm_dir));
}

// ---------------------------------------------------------------- report

ReportMeta report_meta(const ExperimentConfig& c) {
    auto flag = [](bool b) { return std::string(b ? "on" : "off"); };
    ReportMeta m;
    auto& e = m.entries;
    e.emplace_back("master_seed", std::to_string(c.master_seed));
    e.emplace_back("config_hash", config_hash(c));
    e.emplace_back("data", "synthetic target n=" + std::to_string(c.target_samples) + " arity=" +
                               std::to_string(c.target_arity) + "; source n=" + std::to_string(c.source_samples));
    e.emplace_back("range_clip", flag(c.range_clip) + " (attacks and control noise clipped to [-1,1])");
    e.emplace_back("sign_of_zero", "0");
    e.emplace_back("pgd_start", "clean input (no random start)");
    e.emplace_back("pgd_alpha", format_number(c.alpha));
    e.emplace_back("pgd_iterations", std::to_string(c.iterations));
    e.emplace_back("epsilon_default", format_number(c.epsilon));
    e.emplace_back("attack_loss", "BCE summed over outputs");
    e.emplace_back("control_noise", "per-image permutation of the perturbation, reshuffled per cell; seed derived from (master_seed, cell_id)");
    e.emplace_back("convergence", "early stopping on validation loss; best-validation checkpoint");
    e.emplace_back("lr_decay", "x" + format_number(c.train.decay_factor) + " after " + std::to_string(c.train.decay_patience) +
                                   " stalled epochs; stop after " + std::to_string(c.train.stop_after_decays) + " decays");
    e.emplace_back("optimizer", "adam lr=" + format_number(c.train.lr) + " beta1=" + format_number(c.train.beta1) +
                                    " beta2=" + format_number(c.train.beta2) + " eps=" + format_number(c.train.eps));
    e.emplace_back("batch_size", std::to_string(c.train.batch_size));
    e.emplace_back("max_epochs", std::to_string(c.train.max_epochs));
    e.emplace_back("class_balancing", flag(c.train.class_balancing));
    e.emplace_back("augmentation", augment_json(c.train.augment).dump());
    e.emplace_back("fine_tuning", "all layers");
    e.emplace_back("pretraining", "shared source checkpoint per family; fresh head");
    e.emplace_back("surrogate_instances", "targets use instance 1, same-(family,init,set) surrogates instance 2");
    e.emplace_back("evaluation_set", "full test split");
    e.emplace_back("attack_statistic", "mean over FGSM and PGD (method=mean rows); per-method rows retained");
    e.emplace_back("relative_pct", "round(100*adv_auc/clean_auc)");
    e.emplace_back("replicate_rule", "a finding holds if the ordering appears in >= 2 of 3 master seeds");
    e.emplace_back("timing", flag(c.record_timing));
    return m;
}

const std::vector<std::string>& report_columns() {
    static const std::vector<std::string> cols{
        "cell_id",     "experiment", "target_family", "target_init", "target_set",  "surrogate_family",
        "surrogate_init", "surrogate_set", "method",  "epsilon",     "alpha",       "iters",
        "clean_auc",   "adv_auc",    "control_auc",   "relative_pct", "mean_ssim",  "seconds"};
    return cols;
}

std::string format_report(const std::vector<ReportRow>& rows, const ReportMeta& meta) {
    std::ostringstream os;
    for (const auto& [k, v] : meta.entries) os << "# " << k << '=' << v << '\n';
    for (std::size_t i = 0; i < report_columns().size(); ++i) os << (i ? "," : "") << report_columns()[i];
    os << '\n';
    for (const auto& r : rows) {
        os << r.cell_id << ',' << r.experiment << ',' << r.target_family << ',' << r.target_init << ',' << r.target_set
           << ',' << r.surrogate_family << ',' << r.surrogate_init << ',' << r.surrogate_set << ',' << r.method << ','
           << format_number(r.epsilon) << ',' << (r.alpha ? format_number(*r.alpha) : "") << ','
           << (r.iters ? std::to_string(*r.iters) : "") << ',' << format_number(r.clean_auc) << ','
           << format_number(r.adv_auc) << ',' << format_number(r.control_auc) << ',' << r.relative_pct << ','
           << format_number(r.mean_ssim) << ',' << (r.seconds ? format_number(*r.seconds) : "") << '\n';
    }
    return os.str();
}

void write_report(const std::vector<ReportRow>& rows, const ReportMeta& meta, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ScenarioError("cannot write report " + path.string());
    out << format_report(rows, meta);
    if (!out) throw ScenarioError("failed writing report " + path.string());
}

namespace {

double parse_double(const std::string& s, std::size_t line) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw ScenarioError("report line " + std::to_string(line) + ": bad number '" + s + "'");
    return v;
}

}  // namespace

std::vector<ReportRow> parse_report(const std::string& text, ReportMeta* meta) {
    std::istringstream in(text);
    std::string line;
    std::size_t n = 0;
    bool header = false;
    std::vector<ReportRow> rows;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (meta) {
                const auto body = line.substr(line.size() > 1 && line[1] == ' ' ? 2 : 1);
                const auto eq = body.find('=');
                meta->entries.emplace_back(body.substr(0, eq), eq == std::string::npos ? "" : body.substr(eq + 1));
            }
            continue;
        }
        std::vector<std::string> f;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (!line.empty() && line.back() == ',') f.emplace_back();
        if (!header) {
            if (f != report_columns()) throw ScenarioError("report line " + std::to_string(n) + ": unexpected header");
            header = true;
            continue;
        }
        if (f.size() != report_columns().size())
            throw ScenarioError("report line " + std::to_string(n) + ": expected " + std::to_string(report_columns().size()) +
                                " fields, got " + std::to_string(f.size()));
        ReportRow r;
        r.cell_id = f[0];
        r.experiment = f[1];
        r.target_family = f[2];
        r.target_init = f[3];
        r.target_set = f[4];
        r.surrogate_family = f[5];
        r.surrogate_init = f[6];
        r.surrogate_set = f[7];
        r.method = f[8];
        r.epsilon = parse_double(f[9], n);
        if (!f[10].empty()) r.alpha = parse_double(f[10], n);
        if (!f[11].empty()) r.iters = static_cast<std::size_t>(parse_double(f[11], n));
        r.clean_auc = parse_double(f[12], n);
        r.adv_auc = parse_double(f[13], n);
        r.control_auc = parse_double(f[14], n);
        r.relative_pct = static_cast<int>(parse_double(f[15], n));
        r.mean_ssim = parse_double(f[16], n);
        if (!f[17].empty()) r.seconds = parse_double(f[17], n);
        rows.push_back(std::move(r));
    }
    if (!header) throw ScenarioError("report has no header line");
    return rows;
}

std::vector<ReportRow> read_report(const std::filesystem::path& path, ReportMeta* meta) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ScenarioError("cannot read report " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return parse_report(os.str(), meta);
}

void render_figures(const std::vector<ReportRow>& rows, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    std::map<double, std::map<std::string, const ReportRow*>> by_eps;
    for (const auto& r : rows)
        if (r.experiment == "sweep" && r.averaged() && r.method != "mean") by_eps[r.epsilon][r.method] = &r;
    std::ofstream ssim_out(dir / "epsilon_ssim.tsv"), auc_out(dir / "epsilon_auc.tsv");
    if (!ssim_out || !auc_out) throw ScenarioError("cannot write figure tables under " + dir.string());
    ssim_out << "epsilon\tmethod\tmean_ssim\n";
    auc_out << "epsilon\tmethod\tclean_auc\tadv_auc\tcontrol_auc\n";
    for (const auto& [eps, methods] : by_eps)
        for (const auto& [m, r] : methods) {
            ssim_out << format_number(eps) << '\t' << m << '\t' << format_number(r->mean_ssim) << '\n';
            auc_out << format_number(eps) << '\t' << m << '\t' << format_number(r->clean_auc) << '\t'
                    << format_number(r->adv_auc) << '\t' << format_number(r->control_auc) << '\n';
        }
}

}  // namespace tl
