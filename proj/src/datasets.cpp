#include "transferlab/datasets.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "transferlab/rng.hpp"

namespace tl {

Tensor<float> Dataset::images(std::span<const std::size_t> indices) const {
    Tensor<float> out({indices.size(), 1, height, width});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto src = image(indices[i]);
        std::copy(src.begin(), src.end(), out.data() + i * plane());
    }
    return out;
}

Tensor<float> Dataset::label_tensor(std::span<const std::size_t> indices) const {
    Tensor<float> out({indices.size(), arity});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto src = label(indices[i]);
        std::copy(src.begin(), src.end(), out.data() + i * arity);
    }
    return out;
}

void Dataset::validate() const {
    if (height == 0 || width == 0 || arity == 0) throw DatasetError("dataset '" + name + "': zero-sized dimension");
    if (pixels.size() != size() * plane()) throw DatasetError("dataset '" + name + "': pixel count does not match samples");
    if (labels.size() != size() * arity) throw DatasetError("dataset '" + name + "': label count does not match arity");
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        if (!(pixels[i] >= -1.0f && pixels[i] <= 1.0f))
            throw DatasetError("dataset '" + name + "': sample " + std::to_string(i / plane()) + " leaves [-1, 1]");
    }
}

double SyntheticParams::target_mean_gap(std::size_t height, std::size_t width) const {
    // a '+' covers 2L-1 pixels, the replacement distractor bar L pixels
    const double mean_amp = 0.5 * (amplitude_lo + amplitude_hi);
    return mean_amp * static_cast<double>(bar_length - 1) / static_cast<double>(height * width);
}

namespace {

struct Pixel {
    int x, y;
    friend bool operator<(const Pixel& a, const Pixel& b) { return a.y != b.y ? a.y < b.y : a.x < b.x; }
};

using PixelSet = std::set<Pixel>;

// orientation 0: 0 deg (horizontal), 1: 45 deg, 2: 90 deg, 3: 135 deg
void add_bar(PixelSet& s, int cx, int cy, int half, int orientation) {
    static constexpr int dx[4] = {1, 1, 0, 1};
    static constexpr int dy[4] = {0, -1, 1, 1};
    for (int t = -half; t <= half; ++t) s.insert({cx + t * dx[orientation], cy + t * dy[orientation]});
}

PixelSet compound(Shape2d shape, int cx, int cy, int half) {
    PixelSet s;
    switch (shape) {
        case Shape2d::Plus:
            add_bar(s, cx, cy, half, 0);
            add_bar(s, cx, cy, half, 2);
            break;
        case Shape2d::Cross:
            add_bar(s, cx, cy, half, 1);
            add_bar(s, cx, cy, half, 3);
            break;
        case Shape2d::Tee:
            add_bar(s, cx, cy - half, half, 0);
            add_bar(s, cx, cy, half, 2);
            break;
        case Shape2d::Corner:
            add_bar(s, cx - half, cy, half, 2);
            add_bar(s, cx, cy + half, half, 0);
            break;
        case Shape2d::Box: {
            const int r = std::max(1, half - 1);
            for (int t = -r; t <= r; ++t) {
                s.insert({cx + t, cy - r});
                s.insert({cx + t, cy + r});
                s.insert({cx - r, cy + t});
                s.insert({cx + r, cy + t});
            }
            break;
        }
    }
    return s;
}

class Canvas {
public:
    Canvas(std::size_t h, std::size_t w) : h_(h), w_(w), v_(h * w, 0.0) {}

    std::size_t height() const { return h_; }
    std::size_t width() const { return w_; }

    void stamp(const PixelSet& s, double amplitude) {
        for (const auto& p : s)
            if (p.x >= 0 && p.y >= 0 && p.x < static_cast<int>(w_) && p.y < static_cast<int>(h_))
                v_[static_cast<std::size_t>(p.y) * w_ + static_cast<std::size_t>(p.x)] += amplitude;
    }

    void add(const std::vector<double>& field, double scale) {
        for (std::size_t i = 0; i < v_.size(); ++i) v_[i] += scale * field[i];
    }

    void emit(std::vector<float>& out) const {
        for (double v : v_) out.push_back(static_cast<float>(std::clamp(v, -1.0, 1.0)));
    }

private:
    std::size_t h_, w_;
    std::vector<double> v_;
};

// Unit-variance noise smoothed by a 3x3 box filter.
std::vector<double> smooth_field(std::size_t h, std::size_t w, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> raw((h + 2) * (w + 2));
    for (auto& v : raw) v = normal(rng);
    std::vector<double> out(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double s = 0.0;
            for (std::size_t dy = 0; dy < 3; ++dy)
                for (std::size_t dx = 0; dx < 3; ++dx) s += raw[(y + dy) * (w + 2) + x + dx];
            out[y * w + x] = s / 3.0;
        }
    return out;
}

// Group sizes uniform in [lo, hi], summing to exactly n.
std::vector<std::size_t> group_sizes(std::size_t n, std::size_t lo, std::size_t hi, Rng& rng) {
    std::vector<std::size_t> sizes;
    std::size_t used = 0;
    while (used < n) {
        const std::size_t remaining = n - used;
        std::size_t s = remaining;
        if (remaining > hi) {
            s = std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
            if (remaining - s < lo) s = remaining - lo >= lo ? remaining - lo : remaining;
            if (s > hi) s = hi;
        }
        sizes.push_back(s);
        used += s;
    }
    return sizes;
}

template <class DrawSample>
Dataset generate(std::string name, std::size_t n, std::size_t arity, std::uint64_t seed, const SyntheticParams& p,
                 DrawSample&& draw) {
    if (n < 100) throw DatasetError(name + ": need at least 100 samples to honour the group structure, got " + std::to_string(n));
    if (p.group_min < 2 || p.group_max < p.group_min) throw DatasetError(name + ": invalid group size range");
    if (p.bar_length < 3 || p.bar_length % 2 == 0) throw DatasetError(name + ": bar length must be odd and >= 3");
    if (!(p.group_share >= 0.0 && p.group_share <= 1.0)) throw DatasetError(name + ": group_share must be in [0, 1]");
    Dataset d;
    d.name = std::move(name);
    d.arity = arity;
    d.pixels.reserve(n * d.plane());
    d.labels.reserve(n * arity);
    d.groups.reserve(n);
    Rng rng(seed);
    const auto sizes = group_sizes(n, p.group_min, p.group_max, rng);
    const double shared = p.noise_sigma * std::sqrt(p.group_share);
    const double own = p.noise_sigma * std::sqrt(1.0 - p.group_share);
    for (std::size_t g = 0; g < sizes.size(); ++g) {
        Rng grng(derive_seed(seed, g));
        const auto group_noise = smooth_field(d.height, d.width, grng);
        for (std::size_t k = 0; k < sizes[g]; ++k) {
            Canvas c(d.height, d.width);
            c.add(group_noise, shared);
            c.add(smooth_field(d.height, d.width, grng), own);
            draw(c, grng, d.labels);
            c.emit(d.pixels);
            d.groups.push_back(static_cast<std::int64_t>(g));
        }
    }
    return d;
}

}  // namespace

Dataset generate_target_task(std::size_t n, std::uint64_t seed, std::size_t arity, const SyntheticParams& p) {
    if (arity == 0 || arity > kMaxTargetArity)
        throw DatasetError("target task: arity must be in [1, " + std::to_string(kMaxTargetArity) + "]");
    const int half = static_cast<int>(p.bar_length / 2);
    auto place = [half](Rng& rng, int size) {
        return std::uniform_int_distribution<int>(half + 1, size - half - 2)(rng);
    };
    return generate("target", n, arity, seed, p, [&](Canvas& c, Rng& rng, std::vector<float>& labels) {
        std::uniform_real_distribution<double> amp(p.amplitude_lo, p.amplitude_hi);
        std::uniform_int_distribution<int> orient(0, 3);
        std::bernoulli_distribution coin(0.5);
        const int h = static_cast<int>(c.height()), w = static_cast<int>(c.width());
        std::size_t bars = p.distractors;
        for (std::size_t j = 0; j < arity; ++j) {
            const bool present = coin(rng);
            labels.push_back(present ? 1.0f : 0.0f);
            if (present) {
                c.stamp(compound(static_cast<Shape2d>(j), place(rng, w), place(rng, h), half), amp(rng));
            } else if (arity == 1) {
                ++bars;
            }
        }
        for (std::size_t b = 0; b < bars; ++b) {
            PixelSet s;
            add_bar(s, place(rng, w), place(rng, h), half, orient(rng));
            c.stamp(s, amp(rng));
        }
    });
}

Dataset generate_source_task(std::size_t n, std::uint64_t seed, const SyntheticParams& p) {
    const int half = static_cast<int>(p.bar_length / 2);
    auto place = [half](Rng& rng, int size) {
        return std::uniform_int_distribution<int>(half + 1, size - half - 2)(rng);
    };
    return generate("source", n, kSourceArity, seed, p, [&](Canvas& c, Rng& rng, std::vector<float>& labels) {
        std::uniform_real_distribution<double> amp(p.amplitude_lo, p.amplitude_hi);
        std::uniform_int_distribution<int> orient(0, 3);
        std::bernoulli_distribution coin(0.5);
        const int h = static_cast<int>(c.height()), w = static_cast<int>(c.width());
        for (std::size_t j = 0; j < kSourceArity; ++j) {
            const bool present = coin(rng);
            labels.push_back(present ? 1.0f : 0.0f);
            if (present) c.stamp(compound(static_cast<Shape2d>(j + 1), place(rng, w), place(rng, h), half), amp(rng));
        }
        for (std::size_t b = 0; b < p.distractors; ++b) {
            PixelSet s;
            add_bar(s, place(rng, w), place(rng, h), half, orient(rng));
            c.stamp(s, amp(rng));
        }
    });
}

std::vector<std::size_t> SubsetSplit::all() const {
    std::vector<std::size_t> out = train;
    out.insert(out.end(), validation.begin(), validation.end());
    std::sort(out.begin(), out.end());
    return out;
}

void SplitRatios::validate() const {
    auto open_unit = [](double v) { return v > 0.0 && v < 1.0; };
    if (!open_unit(test) || !open_unit(validation) || !open_unit(d2_half) || !open_unit(d1_tenth))
        throw DatasetError("split: every ratio must lie strictly between 0 and 1");
}

std::string canonical_subset_name(std::string_view name) {
    if (name == "d1" || name == "d2" || name == "test") return std::string(name);
    if (name == "d2_half" || name == "d2/2") return "d2_half";
    if (name == "d1_tenth" || name == "d1/10") return "d1_tenth";
    throw DatasetError("unknown subset '" + std::string(name) + "' (expected d1, d2, d2_half, d1_tenth)");
}

const SubsetSplit& Partition::subset(std::string_view name) const {
    const auto c = canonical_subset_name(name);
    if (c == "d1") return d1;
    if (c == "d2") return d2;
    if (c == "d2_half") return d2_half;
    if (c == "d1_tenth") return d1_tenth;
    throw DatasetError("subset 'test' has no train/validation split");
}

namespace {

std::vector<std::int64_t> unique_groups(const Dataset& data) {
    std::vector<std::int64_t> out;
    std::set<std::int64_t> seen;
    for (auto g : data.groups)
        if (seen.insert(g).second) out.push_back(g);
    return out;
}

std::size_t portion(std::size_t n, double r) {
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(static_cast<double>(n) * r)), 1, n);
}

std::vector<std::size_t> members(const Dataset& data, const std::vector<std::int64_t>& groups) {
    const std::set<std::int64_t> g(groups.begin(), groups.end());
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < data.size(); ++i)
        if (g.count(data.groups[i])) out.push_back(i);
    return out;
}

struct GroupSplit {
    std::vector<std::int64_t> train, validation;
};

SubsetSplit materialize(const Dataset& data, const GroupSplit& gs) {
    return {members(data, gs.train), members(data, gs.validation)};
}

GroupSplit sample_groups(const GroupSplit& from, double ratio, Rng& rng) {
    GroupSplit out;
    auto pick = [&](std::vector<std::int64_t> src) {
        std::shuffle(src.begin(), src.end(), rng);
        src.resize(portion(src.size(), ratio));
        return src;
    };
    out.train = pick(from.train);
    out.validation = pick(from.validation);
    return out;
}

}  // namespace

Partition split(const Dataset& data, const SplitRatios& ratios, std::uint64_t seed) {
    ratios.validate();
    auto groups = unique_groups(data);
    if (groups.size() < 40) {
        throw DatasetError("split: need at least 40 groups for d1/d2/test and their slices, got " +
                           std::to_string(groups.size()));
    }
    Rng rng(seed);
    std::shuffle(groups.begin(), groups.end(), rng);
    const std::size_t n_test = portion(groups.size(), ratios.test);
    const std::vector<std::int64_t> test(groups.begin(), groups.begin() + static_cast<std::ptrdiff_t>(n_test));
    const std::vector<std::int64_t> dev(groups.begin() + static_cast<std::ptrdiff_t>(n_test), groups.end());
    const std::size_t half = dev.size() / 2;
    auto fixed_split = [&](std::vector<std::int64_t> g) {
        const std::size_t n_val = portion(g.size(), ratios.validation);
        GroupSplit s;
        s.validation.assign(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(n_val));
        s.train.assign(g.begin() + static_cast<std::ptrdiff_t>(n_val), g.end());
        return s;
    };
    const GroupSplit d1 = fixed_split({dev.begin(), dev.begin() + static_cast<std::ptrdiff_t>(half)});
    const GroupSplit d2 = fixed_split({dev.begin() + static_cast<std::ptrdiff_t>(half), dev.end()});
    const GroupSplit d2_half = sample_groups(d2, ratios.d2_half, rng);
    const GroupSplit d1_tenth = sample_groups(d1, ratios.d1_tenth, rng);

    std::map<std::int64_t, int> owner;
    auto claim = [&](const std::vector<std::int64_t>& gs, int who) {
        for (auto g : gs) {
            auto [it, fresh] = owner.emplace(g, who);
            if (!fresh && it->second != who) throw std::logic_error("split: group assigned to two subsets");
        }
    };
    claim(test, 0);
    claim(d1.train, 1);
    claim(d1.validation, 1);
    claim(d2.train, 2);
    claim(d2.validation, 2);

    Partition p;
    p.ratios = ratios;
    p.d1 = materialize(data, d1);
    p.d2 = materialize(data, d2);
    p.d2_half = materialize(data, d2_half);
    p.d1_tenth = materialize(data, d1_tenth);
    p.test = members(data, test);
    return p;
}

SubsetSplit holdout(const Dataset& data, double validation, std::uint64_t seed) {
    auto groups = unique_groups(data);
    if (groups.size() < 2) throw DatasetError("holdout: need at least two groups");
    Rng rng(seed);
    std::shuffle(groups.begin(), groups.end(), rng);
    const std::size_t n_val = std::min(portion(groups.size(), validation), groups.size() - 1);
    GroupSplit s;
    s.validation.assign(groups.begin(), groups.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.train.assign(groups.begin() + static_cast<std::ptrdiff_t>(n_val), groups.end());
    return materialize(data, s);
}

std::filesystem::path sidecar_path(const std::filesystem::path& manifest) {
    auto p = manifest;
    p.replace_extension(".raw");
    return p;
}

Dataset ingest_external(const std::filesystem::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw DatasetError("ingest: cannot open manifest " + manifest.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DatasetError("ingest: " + manifest.string() + " is not valid JSON: " + e.what());
    }
    Dataset d;
    double lo = 0, hi = 0;
    std::size_t count = 0;
    try {
        d.name = j.at("name").get<std::string>();
        count = j.at("count").get<std::size_t>();
        d.height = j.at("height").get<std::size_t>();
        d.width = j.at("width").get<std::size_t>();
        d.arity = j.at("arity").get<std::size_t>();
        lo = j.at("intensity_min").get<double>();
        hi = j.at("intensity_max").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw DatasetError("ingest: manifest field error: " + std::string(e.what()));
    }
    if (!(hi > lo)) throw DatasetError("ingest: intensity_max must exceed intensity_min");
    if (d.height == 0 || d.width == 0 || d.arity == 0 || count == 0)
        throw DatasetError("ingest: count, height, width and arity must be positive");
    const auto& labels = j.at("labels");
    const auto& groups = j.at("groups");
    if (!labels.is_array() || labels.size() != count)
        throw DatasetError("ingest: expected " + std::to_string(count) + " label rows");
    if (!groups.is_array() || groups.size() != count)
        throw DatasetError("ingest: expected " + std::to_string(count) + " group ids");
    for (std::size_t i = 0; i < count; ++i) {
        const auto& row = labels[i];
        if (row.is_number() && d.arity == 1) {
            d.labels.push_back(row.get<float>());
        } else if (row.is_array() && row.size() == d.arity) {
            for (const auto& v : row) d.labels.push_back(v.get<float>());
        } else {
            throw DatasetError("ingest: label row " + std::to_string(i) + " has " +
                               std::to_string(row.is_array() ? row.size() : 1) + " values, manifest arity is " +
                               std::to_string(d.arity));
        }
        for (std::size_t k = d.labels.size() - d.arity; k < d.labels.size(); ++k)
            if (d.labels[k] != 0.0f && d.labels[k] != 1.0f)
                throw DatasetError("ingest: label row " + std::to_string(i) + " holds a non-binary value");
        if (!groups[i].is_number_integer() || groups[i].get<std::int64_t>() < 0)
            throw DatasetError("ingest: group id of sample " + std::to_string(i) + " is not a non-negative integer");
        d.groups.push_back(groups[i].get<std::int64_t>());
    }
    const auto raw = sidecar_path(manifest);
    std::ifstream px(raw, std::ios::binary);
    if (!px) throw DatasetError("ingest: cannot open pixel file " + raw.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(px)), std::istreambuf_iterator<char>());
    const std::size_t expected = count * d.height * d.width * 4;
    if (bytes.size() != expected) {
        throw DatasetError("ingest: pixel file " + raw.string() + " holds " + std::to_string(bytes.size()) +
                           " bytes, expected n*H*W*4 = " + std::to_string(expected));
    }
    d.pixels.resize(count * d.plane());
    for (std::size_t i = 0; i < d.pixels.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
        const double v = std::bit_cast<float>(bits);
        if (!(v >= lo && v <= hi))
            throw DatasetError("ingest: sample " + std::to_string(i / d.plane()) + " has a value outside the manifest range");
        d.pixels[i] = static_cast<float>(2.0 * (v - lo) / (hi - lo) - 1.0);
    }
    d.validate();
    return d;
}

void export_external(const Dataset& data, const std::filesystem::path& manifest) {
    data.validate();
    nlohmann::json j;
    j["name"] = data.name;
    j["count"] = data.size();
    j["height"] = data.height;
    j["width"] = data.width;
    j["arity"] = data.arity;
    j["intensity_min"] = -1.0;
    j["intensity_max"] = 1.0;
    auto labels = nlohmann::json::array();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto l = data.label(i);
        labels.push_back(std::vector<float>(l.begin(), l.end()));
    }
    j["labels"] = std::move(labels);
    j["groups"] = data.groups;
    std::ofstream out(manifest);
    if (!out) throw DatasetError("export: cannot write " + manifest.string());
    out << j.dump() << '\n';
    std::ofstream px(sidecar_path(manifest), std::ios::binary | std::ios::trunc);
    if (!px) throw DatasetError("export: cannot write " + sidecar_path(manifest).string());
    for (float v : data.pixels) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        for (int b = 0; b < 4; ++b) px.put(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
}

void hflip(std::span<float> image, std::size_t height, std::size_t width) {
    for (std::size_t y = 0; y < height; ++y) std::reverse(image.begin() + y * width, image.begin() + (y + 1) * width);
}

void vflip(std::span<float> image, std::size_t height, std::size_t width) {
    for (std::size_t y = 0; y < height / 2; ++y)
        std::swap_ranges(image.begin() + y * width, image.begin() + (y + 1) * width,
                         image.begin() + (height - 1 - y) * width);
}

void rot90(std::span<float> image, std::size_t size) {
    std::vector<float> tmp(image.begin(), image.end());
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) image[(size - 1 - x) * size + y] = tmp[y * size + x];
}

}  // namespace tl
