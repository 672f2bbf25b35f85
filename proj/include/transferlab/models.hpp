#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "transferlab/graph.hpp"

namespace tl {

/// Two architecture families that share no block type.
///   ArchA: stem conv, then multi-branch blocks (1x1, 3x3 and 5x5 convs run
///          side by side and concatenated), each followed by max-pool.
///   ArchB: stem conv, then dense blocks where every conv sees the
///          concatenation of all earlier outputs, with 1x1 transitions.
enum class Family : std::uint32_t { ArchA = 0, ArchB = 1 };
enum class InitMode : std::uint32_t { Random = 0, Pretrained = 1 };

const char* to_string(Family f);
const char* to_string(InitMode m);
Family parse_family(const std::string& s);
InitMode parse_init_mode(const std::string& s);

struct ArchSpec {
    Family family = Family::ArchA;
    std::uint32_t channels = 1;
    std::uint32_t height = 32;
    std::uint32_t width = 32;
    std::uint32_t arity = 1;
    std::uint32_t stem = 8;    // stem conv channels
    std::uint32_t width_knob = 6;  // ArchA branch width / ArchB growth rate
    std::uint32_t blocks = 2;
    std::uint32_t layers = 2;  // ArchB convs per dense block (ignored by ArchA)

    static ArchSpec defaults(Family f, std::uint32_t arity = 1) {
        ArchSpec s;
        s.family = f;
        s.arity = arity;
        return s;
    }

    void validate() const;
    /// Same input domain and body layout; output arity may differ.
    bool same_body(const ArchSpec& o) const;
    friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

class ModelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <class T>
Graph<T> build_graph(const ArchSpec& spec);

std::size_t param_count(const ArchSpec& spec);
/// Index of the first output-head parameter; everything before it is the body.
std::size_t head_offset(const ArchSpec& spec);

struct Provenance {
    InitMode init = InitMode::Random;
    std::uint64_t init_seed = 0;
    std::string training_set;       // empty until trained
    std::uint64_t training_seed = 0;
    std::string source_checkpoint;  // checkpoint id of the body source, if pretrained
    bool is_source = false;         // trained on the source task

    friend bool operator==(const Provenance&, const Provenance&) = default;
};

class Model {
public:
    Model(ArchSpec spec, std::vector<float> params, Provenance provenance);

    const ArchSpec& spec() const noexcept { return spec_; }
    const Provenance& provenance() const noexcept { return provenance_; }
    std::span<const float> params() const noexcept { return params_; }
    std::span<float> mutable_params() noexcept { return params_; }

    /// Graph bound to this model's parameters. The model must outlive it.
    Graph<float> graph() const;
    Graph<double> graph_f64(std::vector<double>& storage) const;

    /// Returns a copy with the provenance stamped after training.
    Model with_provenance(Provenance p) const { return Model(spec_, params_, std::move(p)); }

    friend bool operator==(const Model&, const Model&) = default;

private:
    ArchSpec spec_;
    std::vector<float> params_;
    Provenance provenance_;
};

/// He-initialized weights (normal, std sqrt(2 / fan_in)), zero biases.
Model build(const ArchSpec& spec, std::uint64_t seed);

/// Copies every body parameter from the source checkpoint and initializes a
/// fresh head from head_seed.
Model load_pretrained(const ArchSpec& spec, const Model& source, std::uint64_t head_seed);

// Checkpoint file: "TLCK", u32 version, arch record, provenance record,
// u64 parameter count, little-endian f32 parameters in declared order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<unsigned char> serialize(const Model& model);
Model deserialize(std::span<const unsigned char> bytes);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
/// Stable content id: FNV-1a of the serialized checkpoint, as 16 hex digits.
std::string checkpoint_id(const Model& model);

}  // namespace tl
