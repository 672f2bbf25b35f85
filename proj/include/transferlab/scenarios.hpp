#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "transferlab/attacks.hpp"
#include "transferlab/datasets.hpp"
#include "transferlab/models.hpp"
#include "transferlab/trainer.hpp"

namespace tl {

class ScenarioError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Everything an experiment run depends on besides the data itself.
struct ExperimentConfig {
    std::uint64_t master_seed = 1;
    std::size_t target_samples = 8000;  // d1_tenth ends up with ~350 samples
    std::size_t source_samples = 3000;
    std::size_t target_arity = 1;
    SyntheticParams synthetic;
    SplitRatios ratios;
    double source_validation = 0.1;
    TrainConfig train = [] {  // seed field ignored: each model derives its own
        TrainConfig t;
        t.max_epochs = 15;
        return t;
    }();
    TrainConfig source_train = [] {  // balancing and augmentation are forced off
        TrainConfig t;
        t.max_epochs = 15;
        return t;
    }();
    ArchSpec arch_a = ArchSpec::defaults(Family::ArchA);
    ArchSpec arch_b = ArchSpec::defaults(Family::ArchB);
    std::vector<Family> families{Family::ArchA, Family::ArchB};
    std::vector<Method> methods{Method::FGSM, Method::PGD};
    std::vector<double> epsilons = default_epsilons();
    double epsilon = 0.02;  // fixed budget outside the sweep
    double alpha = 0.01;
    std::size_t iterations = 20;
    bool range_clip = true;
    bool whitebox = true;  // emit white-box reference cells next to the sweep
    std::size_t jobs = 1;
    bool record_timing = false;  // fill the seconds column (breaks byte-identity)

    ArchSpec arch(Family f) const;
    void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Strict: unknown keys are rejected with their path.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig base = {});
/// FNV-1a over the canonical JSON dump, 16 hex digits.
std::string config_hash(const ExperimentConfig& c);

/// Names one trained model. Instances 1 and 2 of the same (family, init, set)
/// are independently initialized and trained; targets use instance 1.
struct ModelRef {
    Family family = Family::ArchA;
    InitMode init = InitMode::Random;
    std::string set = "d1";
    int instance = 1;

    std::string id() const;        // e.g. A/random/d1/1
    std::string file_stem() const; // e.g. A-random-d1-1
    friend auto operator<=>(const ModelRef&, const ModelRef&) = default;
};

/// Target data, source data, partition and every trained model of one run.
class ModelZoo {
public:
    ModelZoo(const ExperimentConfig& config, Dataset target, Dataset source);
    /// Synthetic data from the config's generator settings and master seed.
    static ModelZoo synthetic(const ExperimentConfig& config);

    const ExperimentConfig& config() const noexcept { return config_; }
    const Dataset& target_data() const noexcept { return target_; }
    const Dataset& source_data() const noexcept { return source_; }
    const Partition& partition() const noexcept { return partition_; }

    /// Checkpoints are loaded from / saved to this directory when set.
    void set_checkpoint_dir(std::filesystem::path dir) { checkpoint_dir_ = std::move(dir); }
    void set_auto_train(bool on) noexcept { auto_train_ = on; }

    /// Trains (or loads) the listed models and any source checkpoints they
    /// need, running independent trainings on up to config.jobs threads.
    void require(const std::vector<ModelRef>& refs);
    void require_sources(const std::vector<Family>& families);
    const Model& model(const ModelRef& ref) const;
    const Model& source(Family f) const;
    bool has(const ModelRef& ref) const { return models_.count(ref) != 0; }
    const std::map<ModelRef, std::vector<EpochRecord>>& histories() const noexcept { return histories_; }

    std::uint64_t init_seed(const ModelRef& ref) const;
    std::uint64_t training_seed(const ModelRef& ref) const;

private:

    ExperimentConfig config_;
    Dataset target_, source_;
    Partition partition_;
    SubsetSplit source_split_;
    std::map<Family, Model> sources_;
    std::map<ModelRef, Model> models_;
    std::map<ModelRef, std::vector<EpochRecord>> histories_;
    std::optional<std::filesystem::path> checkpoint_dir_;
    bool auto_train_ = true;
};

struct ScenarioCell {
    std::string experiment;
    ModelRef target;
    ModelRef surrogate;
    AttackConfig attack;
    std::string eval_set = "test";
    std::uint64_t replicate_seed = 0;

    /// FNV-1a of the canonical field list, 16 hex digits.
    std::string id() const;
};

struct ReportRow {
    std::string cell_id;
    std::string experiment;
    std::string target_family;
    std::string target_init;
    std::string target_set;
    std::string surrogate_family;  // A, B, or same / different on averaged rows
    std::string surrogate_init;
    std::string surrogate_set;
    std::string method;            // fgsm, pgd, or mean
    double epsilon = 0.0;
    std::optional<double> alpha;
    std::optional<std::size_t> iters;
    double clean_auc = 0.0;
    double adv_auc = 0.0;
    double control_auc = 0.0;
    int relative_pct = 0;
    double mean_ssim = 0.0;
    std::optional<double> seconds;

    bool averaged() const { return target_family == "*"; }
    friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

int relative_percent(double adv_auc, double clean_auc);

/// Invariants collected while a run executes.
struct RunAudit {
    InvariantReport invariants;
    std::size_t cells = 0;
    std::size_t cells_with_wrong_call_count = 0;  // target not queried exactly 3 times
    std::size_t calls_during_crafting = 0;
    std::size_t whitebox_batches = 0;
    std::size_t whitebox_loss_violations = 0;  // PGD loss below FGSM loss

    bool ok() const noexcept {
        return invariants.ok() && cells_with_wrong_call_count == 0 && calls_during_crafting == 0 &&
               whitebox_loss_violations == 0;
    }
    std::string describe() const;
    nlohmann::json to_json() const;
};

struct ExperimentResult {
    std::vector<ReportRow> rows;  // sorted by cell id
    RunAudit audit;
};

enum class Experiment { Sweep, Pretraining, Disparity, SmallTarget, All };
const char* to_string(Experiment e);
Experiment parse_experiment(const std::string& s);

/// Runs the cells and the requested experiment's averaged rows. Trains every
/// model the cells need (if the zoo allows it). When pgm_dir is set, writes
/// qualitative image dumps of the first test images for each sweep craft.
ExperimentResult run_epsilon_sweep(ModelZoo& zoo, const std::filesystem::path* pgm_dir = nullptr);
ExperimentResult run_pretraining_matrix(ModelZoo& zoo);
ExperimentResult run_data_disparity(ModelZoo& zoo);
ExperimentResult run_small_target(ModelZoo& zoo);
ExperimentResult run_experiment(ModelZoo& zoo, Experiment which, const std::filesystem::path* pgm_dir = nullptr);

/// Cells of each design, without running them.
std::vector<ScenarioCell> sweep_cells(const ExperimentConfig& c);
std::vector<ScenarioCell> pretraining_cells(const ExperimentConfig& c);
std::vector<ScenarioCell> disparity_cells(const ExperimentConfig& c);
std::vector<ScenarioCell> small_target_cells(const ExperimentConfig& c);

/// Executes cells against a zoo, sharing crafted batches between cells with
/// the same surrogate and attack.
ExperimentResult run_cells(ModelZoo& zoo, const std::vector<ScenarioCell>& cells,
                           const std::filesystem::path* pgm_dir = nullptr);

/// Family-averaged rows (per method and over methods) for a set of cell rows.
std::vector<ReportRow> average_rows(const std::vector<ReportRow>& rows);

void sort_rows(std::vector<ReportRow>& rows);

struct ReportMeta {
    std::vector<std::pair<std::string, std::string>> entries;
};
/// Master seed, config hash, and every design-decision flag.
ReportMeta report_meta(const ExperimentConfig& c);

const std::vector<std::string>& report_columns();
void write_report(const std::vector<ReportRow>& rows, const ReportMeta& meta, const std::filesystem::path& path);
std::string format_report(const std::vector<ReportRow>& rows, const ReportMeta& meta);
std::vector<ReportRow> read_report(const std::filesystem::path& path, ReportMeta* meta = nullptr);
std::vector<ReportRow> parse_report(const std::string& text, ReportMeta* meta = nullptr);

/// Plain numeric tables for plotting: epsilon vs SSIM and epsilon vs AUC
/// (sweep rows averaged over families).
void render_figures(const std::vector<ReportRow>& rows, const std::filesystem::path& dir);

/// Shortest text that parses back to the same double.
std::string format_number(double v);

}  // namespace tl
