#include "transferlab/models.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

#include "transferlab/rng.hpp"

namespace tl {

const char* to_string(Family f) { return f == Family::ArchA ? "A" : "B"; }
const char* to_string(InitMode m) { return m == InitMode::Random ? "random" : "pretrained"; }

Family parse_family(const std::string& s) {
    if (s == "A" || s == "a" || s == "arch_a") return Family::ArchA;
    if (s == "B" || s == "b" || s == "arch_b") return Family::ArchB;
    throw std::invalid_argument("unknown architecture family '" + s + "' (expected A or B)");
}

InitMode parse_init_mode(const std::string& s) {
    if (s == "random") return InitMode::Random;
    if (s == "pretrained") return InitMode::Pretrained;
    throw std::invalid_argument("unknown init mode '" + s + "' (expected random or pretrained)");
}

void ArchSpec::validate() const {
    if (family != Family::ArchA && family != Family::ArchB) throw ModelError("arch: unknown family");
    if (channels == 0 || height < 8 || width < 8) throw ModelError("arch: input must be at least 1x8x8");
    if (arity == 0) throw ModelError("arch: arity must be positive");
    if (stem == 0 || width_knob == 0) throw ModelError("arch: stem and width knobs must be positive");
    if (blocks == 0 || blocks > 3) throw ModelError("arch: blocks must be in [1, 3]");
    if (family == Family::ArchA && width_knob < 2) throw ModelError("arch: ArchA branch width must be >= 2");
    if (family == Family::ArchB && layers == 0) throw ModelError("arch: ArchB needs at least one layer per block");
    // each block halves the resolution after the stem pool
    if ((height >> (blocks + 1)) < 1 || (width >> (blocks + 1)) < 1) throw ModelError("arch: too many blocks for input size");
}

bool ArchSpec::same_body(const ArchSpec& o) const {
    ArchSpec a = *this, b = o;
    a.arity = b.arity = 1;
    if (a.family != Family::ArchB) a.layers = b.layers = 0;
    return a == b;
}

template <class T>
Graph<T> build_graph(const ArchSpec& spec) {
    spec.validate();
    Graph<T> g({spec.channels, spec.height, spec.width});
    NodeId x = g.relu(g.conv2d(g.input(), spec.stem, 3, 1, 1, "stem"));
    x = g.max_pool(x, 2, 2);
    if (spec.family == Family::ArchA) {
        const std::size_t w = spec.width_knob;
        for (std::uint32_t b = 0; b < spec.blocks; ++b) {
            const std::string p = "mix" + std::to_string(b);
            const NodeId b1 = g.relu(g.conv2d(x, w, 1, 1, 0, p + ".b1x1"));
            const NodeId b3 = g.relu(g.conv2d(x, w, 3, 1, 1, p + ".b3x3"));
            const NodeId b5 = g.relu(g.conv2d(x, w / 2, 5, 1, 2, p + ".b5x5"));
            x = g.max_pool(g.concat({b1, b3, b5}), 2, 2);
        }
    } else {
        const std::size_t growth = spec.width_knob;
        std::size_t channels = spec.stem;
        for (std::uint32_t b = 0; b < spec.blocks; ++b) {
            const std::string p = "dense" + std::to_string(b);
            for (std::uint32_t l = 0; l < spec.layers; ++l) {
                const NodeId y = g.relu(g.conv2d(x, growth, 3, 1, 1, p + ".conv" + std::to_string(l)));
                x = g.concat({x, y});
                channels += growth;
            }
            channels = (channels + 1) / 2;
            x = g.relu(g.conv2d(x, channels, 1, 1, 0, p + ".transition"));
            x = g.max_pool(x, 2, 2);
        }
    }
    x = g.global_avg_pool(x);
    x = g.dense(x, spec.arity, "head");
    g.sigmoid(x, "prob");
    return g;
}

template Graph<float> build_graph<float>(const ArchSpec&);
template Graph<double> build_graph<double>(const ArchSpec&);

std::size_t param_count(const ArchSpec& spec) { return build_graph<float>(spec).param_count(); }

std::size_t head_offset(const ArchSpec& spec) {
    const auto g = build_graph<float>(spec);
    for (const auto& p : g.params())
        if (p.name.rfind("head.", 0) == 0) return p.offset;
    throw ModelError("arch: graph has no head");
}

Model::Model(ArchSpec spec, std::vector<float> params, Provenance provenance)
    : spec_(spec), params_(std::move(params)), provenance_(std::move(provenance)) {
    spec_.validate();
    if (params_.size() != param_count(spec_)) {
        throw ModelError("model: " + std::to_string(params_.size()) + " parameters for an architecture needing " +
                         std::to_string(param_count(spec_)));
    }
}

Graph<float> Model::graph() const {
    auto g = build_graph<float>(spec_);
    g.bind(params_);
    return g;
}

Graph<double> Model::graph_f64(std::vector<double>& storage) const {
    storage.assign(params_.begin(), params_.end());
    auto g = build_graph<double>(spec_);
    g.bind(storage);
    return g;
}

namespace {

void he_init(const std::vector<ParamInfo>& infos, std::span<float> out, std::size_t from, Rng& rng) {
    for (const auto& p : infos) {
        if (p.offset < from) continue;
        if (p.shape.size() == 1) {
            std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(p.offset), p.size, 0.0f);
            continue;
        }
        const std::size_t fan_in = p.size / p.shape[0];
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (std::size_t i = 0; i < p.size; ++i) out[p.offset + i] = static_cast<float>(dist(rng));
    }
}

}  // namespace

Model build(const ArchSpec& spec, std::uint64_t seed) {
    const auto g = build_graph<float>(spec);
    std::vector<float> params(g.param_count());
    Rng rng(seed);
    he_init(g.params(), params, 0, rng);
    Provenance prov;
    prov.init = InitMode::Random;
    prov.init_seed = seed;
    return Model(spec, std::move(params), prov);
}

Model load_pretrained(const ArchSpec& spec, const Model& source, std::uint64_t head_seed) {
    if (spec.family != source.spec().family) {
        throw ModelError(std::string("load_pretrained: family mismatch, target ") + to_string(spec.family) +
                         " vs checkpoint " + to_string(source.spec().family));
    }
    if (!spec.same_body(source.spec())) throw ModelError("load_pretrained: checkpoint body layout differs from spec");
    const auto g = build_graph<float>(spec);
    std::vector<float> params(g.param_count());
    const std::size_t body = head_offset(spec);
    std::copy_n(source.params().begin(), body, params.begin());
    Rng rng(head_seed);
    he_init(g.params(), params, body, rng);
    Provenance prov;
    prov.init = InitMode::Pretrained;
    prov.init_seed = head_seed;
    prov.source_checkpoint = checkpoint_id(source);
    return Model(spec, std::move(params), prov);
}

namespace {

class Writer {
public:
    void u8(std::uint8_t v) { bytes_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes_.insert(bytes_.end(), s.begin(), s.end());
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    std::vector<unsigned char> take() { return std::move(bytes_); }

private:
    std::vector<unsigned char> bytes_;
};

class Reader {
public:
    explicit Reader(std::span<const unsigned char> b) : b_(b) {}
    std::uint8_t u8() { return need(1), b_[pos_++]; }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
        return v;
    }
    std::string str() {
        const auto n = u32();
        need(n);
        std::string s(b_.begin() + static_cast<std::ptrdiff_t>(pos_), b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    bool done() const { return pos_ == b_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > b_.size()) throw ModelError("checkpoint: truncated file at byte " + std::to_string(pos_));
    }
    std::span<const unsigned char> b_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> serialize(const Model& model) {
    Writer w;
    for (char c : std::string_view("TLCK")) w.u8(static_cast<std::uint8_t>(c));
    w.u32(kCheckpointVersion);
    const ArchSpec& s = model.spec();
    for (std::uint32_t v : {static_cast<std::uint32_t>(s.family), s.channels, s.height, s.width, s.arity, s.stem,
                            s.width_knob, s.blocks, s.layers})
        w.u32(v);
    const Provenance& p = model.provenance();
    w.u32(static_cast<std::uint32_t>(p.init));
    w.u64(p.init_seed);
    w.str(p.training_set);
    w.u64(p.training_seed);
    w.str(p.source_checkpoint);
    w.u8(p.is_source ? 1 : 0);
    w.u64(model.params().size());
    for (float v : model.params()) w.f32(v);
    return w.take();
}

Model deserialize(std::span<const unsigned char> bytes) {
    Reader r(bytes);
    std::string magic;
    for (int i = 0; i < 4; ++i) magic.push_back(static_cast<char>(r.u8()));
    if (magic != "TLCK") throw ModelError("checkpoint: bad magic, not a TLCK file");
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
        throw ModelError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                         std::to_string(kCheckpointVersion) + ")");
    }
    ArchSpec s;
    const auto fam = r.u32();
    if (fam > 1) throw ModelError("checkpoint: unknown family code " + std::to_string(fam));
    s.family = static_cast<Family>(fam);
    s.channels = r.u32();
    s.height = r.u32();
    s.width = r.u32();
    s.arity = r.u32();
    s.stem = r.u32();
    s.width_knob = r.u32();
    s.blocks = r.u32();
    s.layers = r.u32();
    Provenance p;
    const auto init = r.u32();
    if (init > 1) throw ModelError("checkpoint: unknown init mode code " + std::to_string(init));
    p.init = static_cast<InitMode>(init);
    p.init_seed = r.u64();
    p.training_set = r.str();
    p.training_seed = r.u64();
    p.source_checkpoint = r.str();
    p.is_source = r.u8() != 0;
    const auto count = r.u64();
    if (count > (bytes.size() / 4)) throw ModelError("checkpoint: truncated parameter blob");
    std::vector<float> params(count);
    for (auto& v : params) v = r.f32();
    if (!r.done()) throw ModelError("checkpoint: trailing bytes after parameter blob");
    return Model(s, std::move(params), std::move(p));
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    const auto bytes = serialize(model);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ModelError("checkpoint: cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ModelError("checkpoint: write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ModelError("checkpoint: cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

std::string checkpoint_id(const Model& model) {
    const auto bytes = serialize(model);
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace tl
