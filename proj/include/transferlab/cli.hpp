#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "transferlab/scenarios.hpp"

namespace tl::cli {

inline constexpr const char* kSeedEnv = "TRANSFERLAB_SEED";

/// Usage or configuration problem (exit code 1).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    ExperimentConfig experiment;
    std::optional<std::filesystem::path> data_manifest;  // external target data instead of the generator
    std::filesystem::path output_dir = "transferlab-out";

    /// Checks paths and every nested setting; throws ConfigError.
    void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Strict parse: the experiment keys plus "data_manifest" and "output_dir".
/// Relative data paths resolve against `base_dir`.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {},
                               const std::filesystem::path& base_dir = {});

/// Defaults, then the seed environment variable, then the file (if any).
RunConfig load_run_config(const std::optional<std::filesystem::path>& file, const char* env_seed);

/// Zoo over the configured data (generated or ingested).
ModelZoo make_zoo(const RunConfig& c);

/// Writes report CSVs (one per experiment plus the combined one when `which`
/// is All), figure tables, PGM dumps and returns the result.
ExperimentResult experiment_command(const RunConfig& c, Experiment which);

/// Writes manifest.json with the effective config into the output directory.
void write_manifest(const RunConfig& c, const std::string& command, const nlohmann::json& extra);

/// Entry point behind the executable. args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tl::cli
