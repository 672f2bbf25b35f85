#include "transferlab/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "transferlab/rng.hpp"

namespace tl::cli {

namespace fs = std::filesystem;
using nlohmann::json;

void RunConfig::validate() const {
    try {
        experiment.validate();
    } catch (const ScenarioError& e) {
        throw ConfigError(e.what());
    }
    if (data_manifest && !fs::exists(*data_manifest))
        throw ConfigError("data manifest not found: " + data_manifest->string());
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
    if (fs::exists(output_dir) && !fs::is_directory(output_dir))
        throw ConfigError("output_dir exists and is not a directory: " + output_dir.string());
}

json to_json(const RunConfig& c) {
    json j = to_json(c.experiment);
    j["output_dir"] = c.output_dir.string();
    if (c.data_manifest) j["data_manifest"] = c.data_manifest->string();
    return j;
}

RunConfig run_config_from_json(const json& j, RunConfig base, const fs::path& base_dir) {
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    json rest = j;
    try {
        if (rest.contains("output_dir")) {
            base.output_dir = rest.at("output_dir").get<std::string>();
            rest.erase("output_dir");
        }
        if (rest.contains("data_manifest")) {
            fs::path p = rest.at("data_manifest").get<std::string>();
            base.data_manifest = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
            rest.erase("data_manifest");
        }
    } catch (const json::exception&) {
        throw ConfigError("config: output_dir and data_manifest must be strings");
    }
    try {
        base.experiment = experiment_config_from_json(rest, base.experiment);
    } catch (const ScenarioError& e) {
        throw ConfigError(e.what());
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return base;
}

RunConfig load_run_config(const std::optional<fs::path>& file, const char* env_seed) {
    RunConfig c;
    if (env_seed && *env_seed) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env_seed, &end, 10);
        if (*end != '\0') throw ConfigError(std::string(kSeedEnv) + " is not an unsigned integer: '" + env_seed + "'");
        c.experiment.master_seed = v;
    }
    if (file) {
        std::ifstream in(*file);
        if (!in) throw ConfigError("cannot open config file " + file->string());
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw ConfigError("config file " + file->string() + " is not valid JSON: " + e.what());
        }
        c = run_config_from_json(j, c, file->parent_path());
    }
    return c;
}

ModelZoo make_zoo(const RunConfig& c) {
    const auto& e = c.experiment;
    Dataset source = generate_source_task(e.source_samples, derive_seed(e.master_seed, "source-data"), e.synthetic);
    if (!c.data_manifest) return ModelZoo(e, generate_target_task(e.target_samples, derive_seed(e.master_seed, "target-data"),
                                                                  e.target_arity, e.synthetic),
                                          std::move(source));
    Dataset target = ingest_external(*c.data_manifest);
    ExperimentConfig adjusted = e;
    adjusted.target_arity = target.arity;
    if (target.height != source.height || target.width != source.width) {
        throw ScenarioError("external data is " + std::to_string(target.height) + "x" + std::to_string(target.width) +
                            " but the source task is " + std::to_string(source.height) + "x" + std::to_string(source.width));
    }
    return ModelZoo(adjusted, std::move(target), std::move(source));
}

void write_manifest(const RunConfig& c, const std::string& command, const json& extra) {
    fs::create_directories(c.output_dir);
    json m = extra;
    m["command"] = command;
    m["effective_config"] = to_json(c);
    m["config_hash"] = config_hash(c.experiment);
    std::ofstream out(c.output_dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot write manifest in " + c.output_dir.string());
    out << m.dump(2) << '\n';
}

ExperimentResult experiment_command(const RunConfig& c, Experiment which) {
    auto zoo = make_zoo(c);
    zoo.set_checkpoint_dir(c.output_dir / "models");
    const fs::path pgm = c.output_dir / "pgm";
    const bool sweep = which == Experiment::Sweep || which == Experiment::All;
    auto result = run_experiment(zoo, which, sweep ? &pgm : nullptr);
    const auto meta = report_meta(zoo.config());
    write_report(result.rows, meta, c.output_dir / (std::string(to_string(which)) + ".csv"));
    if (which == Experiment::All) {
        for (auto e : {Experiment::Sweep, Experiment::Pretraining, Experiment::Disparity, Experiment::SmallTarget}) {
            std::vector<ReportRow> part;
            for (const auto& r : result.rows)
                if (r.experiment == to_string(e) || (e == Experiment::Sweep && r.experiment == "whitebox")) part.push_back(r);
            write_report(part, meta, c.output_dir / (std::string(to_string(e)) + ".csv"));
        }
    }
    if (sweep) render_figures(result.rows, c.output_dir / "figures");
    return result;
}

namespace {

struct Overrides {
    std::string config;
    std::uint64_t seed = 0;
    std::string out;
    std::size_t jobs = 1;
    std::string data;
    std::size_t samples = 0;
    std::size_t max_epochs = 0;
    bool timing = false;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* out_opt = nullptr;
    CLI::Option* jobs_opt = nullptr;
    CLI::Option* data_opt = nullptr;
    CLI::Option* samples_opt = nullptr;
    CLI::Option* epochs_opt = nullptr;
    CLI::Option* timing_opt = nullptr;
    CLI::Option* config_opt = nullptr;
};

RunConfig effective_config(const Overrides& o) {
    std::optional<fs::path> file;
    if (o.config_opt->count()) file = o.config;
    RunConfig c = load_run_config(file, std::getenv(kSeedEnv));
    if (o.seed_opt->count()) c.experiment.master_seed = o.seed;
    if (o.out_opt->count()) c.output_dir = o.out;
    if (o.jobs_opt->count()) c.experiment.jobs = o.jobs;
    if (o.data_opt->count()) c.data_manifest = fs::path(o.data);
    if (o.samples_opt->count()) c.experiment.target_samples = o.samples;
    if (o.epochs_opt->count()) {
        c.experiment.train.max_epochs = o.max_epochs;
        c.experiment.source_train.max_epochs = o.max_epochs;
    }
    if (o.timing_opt->count()) c.experiment.record_timing = o.timing;
    c.validate();
    return c;
}

void print_summary(const std::vector<ReportRow>& rows, std::ostream& out) {
    std::vector<const ReportRow*> sel;
    for (const auto& r : rows)
        if (r.averaged() && r.method == "mean") sel.push_back(&r);
    std::stable_sort(sel.begin(), sel.end(), [](const ReportRow* a, const ReportRow* b) {
        return std::tie(a->experiment, a->surrogate_family, a->target_init, a->surrogate_init, a->target_set,
                        a->surrogate_set, a->epsilon) < std::tie(b->experiment, b->surrogate_family, b->target_init,
                                                                 b->surrogate_init, b->target_set, b->surrogate_set,
                                                                 b->epsilon);
    });
    out << std::left << std::setw(13) << "experiment" << std::setw(10) << "arch" << std::setw(11) << "target"
        << std::setw(9) << "t.set" << std::setw(11) << "surrogate" << std::setw(9) << "s.set" << std::setw(7) << "eps"
        << std::setw(7) << "clean" << std::setw(7) << "adv" << std::setw(8) << "control" << std::setw(5) << "rel%"
        << "ssim\n";
    out << std::fixed;
    for (const auto* r : sel) {
        out << std::setw(13) << r->experiment << std::setw(10) << r->surrogate_family << std::setw(11) << r->target_init
            << std::setw(9) << r->target_set << std::setw(11) << r->surrogate_init << std::setw(9) << r->surrogate_set
            << std::setprecision(2) << std::setw(7) << r->epsilon << std::setw(7) << r->clean_auc << std::setw(7)
            << r->adv_auc << std::setw(8) << r->control_auc << std::setw(5) << r->relative_pct << std::setprecision(4)
            << r->mean_ssim << '\n';
    }
    out.unsetf(std::ios::fixed);
}

ReportRow attack_row(const Model& surrogate, const Model& target, const AttackConfig& a, const TransferResult& r,
                     double mean_ssim) {
    ReportRow row;
    row.experiment = "attack";
    row.target_family = to_string(target.spec().family);
    row.target_init = to_string(target.provenance().init);
    row.target_set = target.provenance().training_set;
    row.surrogate_family = to_string(surrogate.spec().family);
    row.surrogate_init = to_string(surrogate.provenance().init);
    row.surrogate_set = surrogate.provenance().training_set;
    row.method = to_string(a.method);
    row.epsilon = a.epsilon;
    row.alpha = a.method == Method::FGSM ? a.epsilon : a.alpha;
    row.iters = a.method == Method::FGSM ? 1 : a.iterations;
    row.clean_auc = r.clean_auc;
    row.adv_auc = r.adversarial_auc;
    row.control_auc = r.control_auc;
    row.relative_pct = relative_percent(r.adversarial_auc, r.clean_auc);
    row.mean_ssim = mean_ssim;
    row.cell_id = checkpoint_id(surrogate).substr(0, 8) + checkpoint_id(target).substr(0, 8);
    return row;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"transferlab: black-box adversarial transfer experiments on synthetic medical-style images", "transferlab"};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);
    app.fallthrough();
    app.set_help_all_flag("--help-all", "Print help for every subcommand");

    const ExperimentConfig defaults;
    Overrides o;
    o.seed = defaults.master_seed;
    o.out = RunConfig{}.output_dir.string();
    o.jobs = defaults.jobs;
    o.samples = defaults.target_samples;
    o.max_epochs = defaults.train.max_epochs;
    o.config_opt = app.add_option("-c,--config", o.config, "JSON run config (flags override its values)");
    o.seed_opt = app.add_option("--seed", o.seed, std::string("Master seed (env ") + kSeedEnv + " has lowest precedence)");
    o.out_opt = app.add_option("-o,--out", o.out, "Output directory");
    o.jobs_opt = app.add_option("-j,--jobs", o.jobs, "Parallel training/crafting jobs")->check(CLI::PositiveNumber);
    o.data_opt = app.add_option("--data", o.data, "External target dataset manifest (default: synthetic generator)");
    o.samples_opt = app.add_option("--samples", o.samples, "Synthetic target sample count");
    o.epochs_opt = app.add_option("--max-epochs", o.max_epochs, "Max training epochs (target and source)");
    o.timing_opt = app.add_flag("--timing", o.timing, "Fill the seconds column of reports");

    auto* gen = app.add_subcommand("gen-data", "Generate target and source datasets in the external format");

    std::string family = "A", init = "random", set = "d1";
    int instance = 1;
    auto* train_cmd = app.add_subcommand("train", "Train one model (and its source checkpoint if pretrained)");
    train_cmd->add_option("--family", family, "Architecture family A or B");
    train_cmd->add_option("--init", init, "Initialization: random or pretrained");
    train_cmd->add_option("--set", set, "Development subset: d1, d2, d2_half, d1_tenth");
    train_cmd->add_option("--instance", instance, "Instance number (independent seeds)")->check(CLI::Range(1, 1000));

    std::string pre_family = "A";
    auto* pretrain_cmd = app.add_subcommand("pretrain", "Train the source-task checkpoint of one family");
    pretrain_cmd->add_option("--family", pre_family, "Architecture family A or B");

    std::string checkpoint, target_checkpoint, method = "fgsm";
    double epsilon = defaults.epsilon, alpha = defaults.alpha;
    std::size_t iters = defaults.iterations, dump = 2;
    auto* attack_cmd = app.add_subcommand("attack", "Craft on a surrogate checkpoint and score a target on the test split");
    attack_cmd->add_option("--checkpoint", checkpoint, "Surrogate checkpoint")->required();
    attack_cmd->add_option("--target", target_checkpoint, "Target checkpoint (default: the surrogate, i.e. white-box)");
    attack_cmd->add_option("--method", method, "fgsm or pgd");
    attack_cmd->add_option("--epsilon", epsilon, "L-infinity budget on the [-1,1] scale")->check(CLI::Range(0.0, 2.0));
    attack_cmd->add_option("--alpha", alpha, "PGD step size");
    attack_cmd->add_option("--iters", iters, "PGD iterations");
    attack_cmd->add_option("--dump", dump, "Number of test images dumped as PGM");

    std::string eval_checkpoint, eval_set = "test";
    auto* eval_cmd = app.add_subcommand("eval", "Clean loss and AUC of a checkpoint");
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "Model checkpoint")->required();
    eval_cmd->add_option("--set", eval_set, "test, d1, d2, d2_half or d1_tenth");

    std::string which = "all";
    auto* exp_cmd = app.add_subcommand("experiment", "Run sweep | pretraining | disparity | small-target | all");
    exp_cmd->add_option("name", which, "Experiment to run")
        ->check(CLI::IsMember({"sweep", "pretraining", "disparity", "small-target", "all"}));

    std::string input, figures;
    auto* report_cmd = app.add_subcommand("report", "Summarize a report CSV (family- and method-averaged rows)");
    report_cmd->add_option("--input", input, "Report CSV")->required();
    report_cmd->add_option("--figures", figures, "Also write figure tables into this directory");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    RunConfig cfg;
    try {
        cfg = effective_config(o);
        if (app.got_subcommand(train_cmd)) {
            (void)parse_family(family);
            (void)parse_init_mode(init);
            (void)canonical_subset_name(set);
        }
        if (app.got_subcommand(pretrain_cmd)) (void)parse_family(pre_family);
        if (app.got_subcommand(attack_cmd)) {
            (void)parse_method(method);
            if (!fs::exists(checkpoint)) throw ConfigError("checkpoint not found: " + checkpoint);
            if (!target_checkpoint.empty() && !fs::exists(target_checkpoint))
                throw ConfigError("target checkpoint not found: " + target_checkpoint);
        }
        if (app.got_subcommand(eval_cmd)) {
            if (!fs::exists(eval_checkpoint)) throw ConfigError("checkpoint not found: " + eval_checkpoint);
            if (eval_set != "test") (void)canonical_subset_name(eval_set);
        }
        if (app.got_subcommand(report_cmd) && !fs::exists(input)) throw ConfigError("report not found: " + input);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }

    const auto t0 = std::chrono::steady_clock::now();
    auto wall = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
    try {
        if (app.got_subcommand(gen)) {
            auto zoo = make_zoo(cfg);
            const fs::path dir = cfg.output_dir / "data";
            fs::create_directories(dir);
            export_external(zoo.target_data(), dir / "target.json");
            export_external(zoo.source_data(), dir / "source.json");
            const auto& p = zoo.partition();
            json sizes = {{"d1", p.d1.size()}, {"d2", p.d2.size()}, {"d2_half", p.d2_half.size()},
                          {"d1_tenth", p.d1_tenth.size()}, {"test", p.test.size()}};
            write_manifest(cfg, "gen-data", {{"partition_sizes", sizes}, {"wall_seconds", wall()},
                                            {"artifacts", {"data/target.json", "data/source.json"}}});
            out << "wrote " << (dir / "target.json").string() << " and " << (dir / "source.json").string() << '\n';
        } else if (app.got_subcommand(train_cmd) || app.got_subcommand(pretrain_cmd)) {
            auto zoo = make_zoo(cfg);
            zoo.set_checkpoint_dir(cfg.output_dir / "models");
            if (app.got_subcommand(pretrain_cmd)) {
                const Family f = parse_family(pre_family);
                zoo.require_sources({f});
                const auto path = cfg.output_dir / "models" / (std::string(to_string(f)) + "-source.tlck");
                write_manifest(cfg, "pretrain", {{"checkpoint", path.string()}, {"wall_seconds", wall()}});
                out << "source checkpoint " << path.string() << " (" << checkpoint_id(zoo.source(f)) << ")\n";
            } else {
                const ModelRef ref{parse_family(family), parse_init_mode(init), canonical_subset_name(set), instance};
                zoo.require({ref});
                const auto path = cfg.output_dir / "models" / (ref.file_stem() + ".tlck");
                const auto it = zoo.histories().find(ref);
                if (it != zoo.histories().end())
                    write_history_csv(it->second, cfg.output_dir / "models" / (ref.file_stem() + ".history.csv"));
                const auto ev = evaluate(zoo.model(ref), zoo.target_data(), zoo.partition().test);
                write_manifest(cfg, "train", {{"model", ref.id()}, {"checkpoint", path.string()},
                                             {"test_auc", ev.auc}, {"test_loss", ev.loss}, {"wall_seconds", wall()}});
                out << ref.id() << " -> " << path.string() << "  test AUC " << ev.auc << '\n';
            }
        } else if (app.got_subcommand(attack_cmd)) {
            auto zoo = make_zoo(cfg);
            const Model surrogate = load_checkpoint(checkpoint);
            const Model target = target_checkpoint.empty() ? surrogate : load_checkpoint(target_checkpoint);
            AttackConfig a;
            a.method = parse_method(method);
            a.epsilon = epsilon;
            a.alpha = alpha;
            a.iterations = iters;
            a.range_clip = cfg.experiment.range_clip;
            a.shuffle_seed = derive_seed(cfg.experiment.master_seed, "control/attack");
            const auto& test = zoo.partition().test;
            const auto images = zoo.target_data().images(test);
            const auto labels = zoo.target_data().label_tensor(test);
            TargetEvaluator evaluator(target);
            const auto t = transfer_attack(surrogate, evaluator, images, labels, a);
            const auto inv = check_invariants(t.batch, a);
            auto row = attack_row(surrogate, target, a, t.result, t.batch.mean_ssim());
            if (cfg.experiment.record_timing) row.seconds = wall();
            auto meta = report_meta(cfg.experiment);
            meta.entries.emplace_back("surrogate_checkpoint", checkpoint_id(surrogate));
            meta.entries.emplace_back("target_checkpoint", checkpoint_id(target));
            write_report({row}, meta, cfg.output_dir / "attack.csv");
            for (std::size_t n = 0; n < std::min(dump, images.batch()); ++n) dump_images(cfg.output_dir / "pgm", t.batch, n, epsilon);
            write_manifest(cfg, "attack", {{"invariants_ok", inv.ok()}, {"invariants", inv.describe()},
                                          {"target_calls", t.result.evaluator_calls},
                                          {"target_calls_during_crafting", t.calls_during_crafting},
                                          {"wall_seconds", wall()}});
            out << format_report({row}, {});
            if (!inv.ok() || t.calls_during_crafting != 0) {
                err << "error: attack invariants violated: " << inv.describe() << '\n';
                return 2;
            }
        } else if (app.got_subcommand(eval_cmd)) {
            auto zoo = make_zoo(cfg);
            const Model m = load_checkpoint(eval_checkpoint);
            const auto indices = eval_set == "test" ? zoo.partition().test
                                                    : zoo.partition().subset(canonical_subset_name(eval_set)).all();
            const auto ev = evaluate(m, zoo.target_data(), indices);
            json result = {{"checkpoint", checkpoint_id(m)}, {"set", eval_set}, {"samples", indices.size()},
                           {"loss", ev.loss}, {"auc", ev.auc}};
            fs::create_directories(cfg.output_dir);
            std::ofstream(cfg.output_dir / "eval.json") << result.dump(2) << '\n';
            write_manifest(cfg, "eval", {{"result", result}, {"wall_seconds", wall()}});
            out << result.dump() << '\n';
        } else if (app.got_subcommand(exp_cmd)) {
            const Experiment e = parse_experiment(which);
            const auto result = experiment_command(cfg, e);
            write_manifest(cfg, std::string("experiment ") + which,
                           {{"audit", result.audit.to_json()}, {"rows", result.rows.size()}, {"wall_seconds", wall()}});
            print_summary(result.rows, out);
            if (!result.audit.ok()) {
                err << "error: run audit failed: " << result.audit.describe() << '\n';
                return 2;
            }
        } else if (app.got_subcommand(report_cmd)) {
            const auto rows = read_report(input);
            print_summary(rows, out);
            if (!figures.empty()) render_figures(rows, figures);
        }
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

}  // namespace tl::cli
