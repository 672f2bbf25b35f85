#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "transferlab/tensor.hpp"

namespace tl {

class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Single-channel images in [-1, 1] with label vectors and group (patient) ids.
struct Dataset {
    std::string name;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t arity = 1;
    std::vector<float> pixels;  // sample-major, row-major within a sample
    std::vector<float> labels;  // sample-major, arity per sample
    std::vector<std::int64_t> groups;

    std::size_t size() const noexcept { return groups.size(); }
    std::size_t plane() const noexcept { return height * width; }
    std::span<const float> image(std::size_t i) const { return std::span<const float>(pixels).subspan(i * plane(), plane()); }
    std::span<const float> label(std::size_t i) const { return std::span<const float>(labels).subspan(i * arity, arity); }

    Tensor<float> images(std::span<const std::size_t> indices) const;  // N x 1 x H x W
    Tensor<float> label_tensor(std::span<const std::size_t> indices) const;  // N x arity

    /// Throws if shapes disagree or any value leaves [-1, 1].
    void validate() const;
};

/// Knobs of the synthetic image generator. Images are a smooth noise field
/// (part shared per group, part per sample) with bright line primitives
/// drawn on top.
struct SyntheticParams {
    double noise_sigma = 0.15;
    double group_share = 0.6;    // fraction of noise variance shared inside a group
    double amplitude_lo = 0.4;
    double amplitude_hi = 0.7;
    std::size_t bar_length = 7;
    std::size_t distractors = 3;  // bars per image besides the class structure
    std::size_t group_min = 2;
    std::size_t group_max = 6;

    /// E[mean intensity | y=1] - E[mean intensity | y=0] of the binary
    /// target task, before range clipping.
    double target_mean_gap(std::size_t height, std::size_t width) const;
};

/// Compound shapes used as target labels. Arity 1 uses only Plus.
enum class Shape2d { Plus = 0, Cross = 1, Tee = 2, Corner = 3, Box = 4 };
inline constexpr std::size_t kMaxTargetArity = 5;

/// Target task. For arity 1: positives carry a '+' (horizontal and vertical
/// bar sharing a centre) among distractor bars, negatives carry one extra
/// distractor instead. For arity k: label j marks presence of shape j.
Dataset generate_target_task(std::size_t n, std::uint64_t seed, std::size_t arity = 1, const SyntheticParams& params = {});

/// Source task: multi-label presence of the Cross, Tee, Corner and Box shapes
/// (each present with probability 1/2) among distractor bars. The '+' of the
/// target task never appears.
inline constexpr std::size_t kSourceArity = 4;
Dataset generate_source_task(std::size_t n, std::uint64_t seed, const SyntheticParams& params = {});

/// Fixed train/validation split of one development subset.
struct SubsetSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
    std::size_t size() const { return train.size() + validation.size(); }
    std::vector<std::size_t> all() const;
};

struct SplitRatios {
    double test = 0.12;        // share of groups held out for testing
    double validation = 0.10;  // share of groups of each subset used for validation
    double d2_half = 0.5;
    double d1_tenth = 0.10;

    void validate() const;
};

struct Partition {
    SubsetSplit d1;
    SubsetSplit d2;
    SubsetSplit d2_half;
    SubsetSplit d1_tenth;
    std::vector<std::size_t> test;
    SplitRatios ratios;

    /// Lookup by canonical name: d1, d2, d2_half (or d2/2), d1_tenth (or d1/10).
    const SubsetSplit& subset(std::string_view name) const;
};

std::string canonical_subset_name(std::string_view name);

/// Group-level split: no group id appears in more than one of d1, d2, test.
Partition split(const Dataset& data, const SplitRatios& ratios, std::uint64_t seed);

/// Holdout split of a single dataset (used for the source task).
SubsetSplit holdout(const Dataset& data, double validation, std::uint64_t seed);

/// External format: JSON manifest plus a sidecar of little-endian f32 pixels
/// at the manifest path with extension ".raw".
Dataset ingest_external(const std::filesystem::path& manifest);
void export_external(const Dataset& data, const std::filesystem::path& manifest);
std::filesystem::path sidecar_path(const std::filesystem::path& manifest);

/// In-place flips and rotations on an H x W image (square for rot90).
void hflip(std::span<float> image, std::size_t height, std::size_t width);
void vflip(std::span<float> image, std::size_t height, std::size_t width);
void rot90(std::span<float> image, std::size_t size);

}  // namespace tl
