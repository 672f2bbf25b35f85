#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "transferlab/kernels.hpp"
#include "transferlab/tensor.hpp"

namespace tl {

enum class OpKind { Input, Dense, Conv2d, Relu, Sigmoid, MaxPool, GlobalAvgPool, Concat, SliceChannels, Add };

const char* to_string(OpKind kind);

using NodeId = std::size_t;

struct ParamInfo {
    std::string name;
    Shape shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

struct Node {
    OpKind kind = OpKind::Input;
    std::string name;
    std::vector<NodeId> inputs;
    std::vector<std::size_t> params;  // indices into Graph::params(): weight, bias
    Shape sample_shape;               // output shape without the batch dim
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t begin = 0;  // SliceChannels
    std::size_t end = 0;
};

/// Static feed-forward graph over a flat parameter vector. Nodes are appended
/// in topological order (every input precedes its consumer); forward and
/// backward walk that order. Parameters are borrowed, not owned, so several
/// Graph instances can share one read-only parameter vector across threads.
template <class T>
class Graph {
public:
    explicit Graph(Shape input_shape) {
        if (input_shape.empty()) throw std::invalid_argument("graph: empty input shape");
        Node in;
        in.kind = OpKind::Input;
        in.name = "input";
        in.sample_shape = std::move(input_shape);
        nodes_.push_back(std::move(in));
    }

    NodeId input() const { return 0; }
    NodeId output() const { return output_; }
    void set_output(NodeId id) {
        check_id(id, "set_output");
        output_ = id;
    }

    const Shape& input_shape() const { return nodes_[0].sample_shape; }
    const Shape& output_shape() const { return nodes_[output_].sample_shape; }
    const std::vector<Node>& nodes() const { return nodes_; }
    const std::vector<ParamInfo>& params() const { return params_; }
    std::size_t param_count() const { return param_total_; }

    NodeId conv2d(NodeId x, std::size_t out_channels, std::size_t kernel, std::size_t stride, std::size_t pad,
                  std::string name) {
        const Node& src = node_at(x, name);
        if (src.sample_shape.size() != 3) fail(name, "conv2d expects a CxHxW input, got " + to_string(src.sample_shape));
        kernels::ConvGeometry g{1, src.sample_shape[0], src.sample_shape[1], src.sample_shape[2], out_channels, kernel,
                                stride, pad};
        if (out_channels == 0 || stride == 0) fail(name, "conv2d needs positive channels and stride");
        if (!g.valid()) fail(name, "kernel " + std::to_string(kernel) + " larger than padded input " + to_string(src.sample_shape));
        Node n;
        n.kind = OpKind::Conv2d;
        n.name = name;
        n.inputs = {x};
        n.kernel = kernel;
        n.stride = stride;
        n.pad = pad;
        n.sample_shape = {out_channels, g.out_h(), g.out_w()};
        n.params = {add_param(name + ".weight", {out_channels, g.in_channels, kernel, kernel}),
                    add_param(name + ".bias", {out_channels})};
        return push(std::move(n));
    }

    NodeId dense(NodeId x, std::size_t out_features, std::string name) {
        const Node& src = node_at(x, name);
        if (out_features == 0) fail(name, "dense needs positive width");
        const std::size_t in_features = element_count(src.sample_shape);
        Node n;
        n.kind = OpKind::Dense;
        n.name = name;
        n.inputs = {x};
        n.sample_shape = {out_features};
        n.params = {add_param(name + ".weight", {out_features, in_features}), add_param(name + ".bias", {out_features})};
        return push(std::move(n));
    }

    NodeId relu(NodeId x, std::string name = {}) { return unary(OpKind::Relu, x, std::move(name)); }
    NodeId sigmoid(NodeId x, std::string name = {}) { return unary(OpKind::Sigmoid, x, std::move(name)); }

    NodeId max_pool(NodeId x, std::size_t kernel, std::size_t stride, std::string name = {}) {
        name = default_name(std::move(name), "max_pool");
        const Node& src = node_at(x, name);
        if (src.sample_shape.size() != 3) fail(name, "max_pool expects a CxHxW input");
        if (kernel == 0 || stride == 0) fail(name, "max_pool needs positive kernel and stride");
        if (kernel > src.sample_shape[1] || kernel > src.sample_shape[2]) fail(name, "pool window larger than input");
        Node n;
        n.kind = OpKind::MaxPool;
        n.name = name;
        n.inputs = {x};
        n.kernel = kernel;
        n.stride = stride;
        n.sample_shape = {src.sample_shape[0], (src.sample_shape[1] - kernel) / stride + 1,
                          (src.sample_shape[2] - kernel) / stride + 1};
        return push(std::move(n));
    }

    NodeId global_avg_pool(NodeId x, std::string name = {}) {
        name = default_name(std::move(name), "gap");
        const Node& src = node_at(x, name);
        if (src.sample_shape.size() != 3) fail(name, "global_avg_pool expects a CxHxW input");
        Node n;
        n.kind = OpKind::GlobalAvgPool;
        n.name = name;
        n.inputs = {x};
        n.sample_shape = {src.sample_shape[0]};
        return push(std::move(n));
    }

    NodeId concat(std::vector<NodeId> xs, std::string name = {}) {
        name = default_name(std::move(name), "concat");
        if (xs.empty()) fail(name, "concat of nothing");
        std::size_t channels = 0;
        Shape first;
        for (NodeId id : xs) {
            const Node& src = node_at(id, name);
            if (src.sample_shape.size() != 3) fail(name, "concat expects CxHxW inputs");
            if (first.empty()) first = src.sample_shape;
            if (src.sample_shape[1] != first[1] || src.sample_shape[2] != first[2])
                fail(name, "spatial mismatch between " + to_string(first) + " and " + to_string(src.sample_shape));
            channels += src.sample_shape[0];
        }
        Node n;
        n.kind = OpKind::Concat;
        n.name = name;
        n.inputs = std::move(xs);
        n.sample_shape = {channels, first[1], first[2]};
        return push(std::move(n));
    }

    NodeId slice_channels(NodeId x, std::size_t begin, std::size_t end, std::string name = {}) {
        name = default_name(std::move(name), "slice");
        const Node& src = node_at(x, name);
        if (src.sample_shape.size() != 3) fail(name, "slice_channels expects a CxHxW input");
        if (begin >= end || end > src.sample_shape[0]) fail(name, "bad channel range");
        Node n;
        n.kind = OpKind::SliceChannels;
        n.name = name;
        n.inputs = {x};
        n.begin = begin;
        n.end = end;
        n.sample_shape = {end - begin, src.sample_shape[1], src.sample_shape[2]};
        return push(std::move(n));
    }

    NodeId add(NodeId a, NodeId b, std::string name = {}) {
        name = default_name(std::move(name), "add");
        const Node& na = node_at(a, name);
        const Node& nb = node_at(b, name);
        if (na.sample_shape != nb.sample_shape)
            fail(name, "add shape mismatch " + to_string(na.sample_shape) + " vs " + to_string(nb.sample_shape));
        Node n;
        n.kind = OpKind::Add;
        n.name = name;
        n.inputs = {a, b};
        n.sample_shape = na.sample_shape;
        return push(std::move(n));
    }

    /// Borrow a parameter vector laid out as params() describes.
    void bind(std::span<const T> values) {
        if (values.size() != param_total_) {
            throw std::invalid_argument("graph: bound " + std::to_string(values.size()) + " parameters, expected " +
                                        std::to_string(param_total_));
        }
        bound_ = values;
    }

    std::span<const T> param_values(std::size_t index) const { return bound_.subspan(params_[index].offset, params_[index].size); }

    const Tensor<T>& forward(const Tensor<T>& input) {
        if (bound_.size() != param_total_) throw std::logic_error("graph: forward before parameters were bound");
        if (input.rank() != input_shape().size() + 1 || input.sample_shape() != input_shape()) {
            fail("input", "expected batch x " + to_string(input_shape()) + ", got " + to_string(input.shape()));
        }
        const std::size_t batch = input.batch();
        acts_.resize(nodes_.size());
        argmax_.resize(nodes_.size());
        acts_[0] = input;
        for (NodeId id = 1; id < nodes_.size(); ++id) forward_node(id, batch);
        forwarded_ = true;
        return acts_[output_];
    }

    const Tensor<T>& activation(NodeId id) const {
        if (!forwarded_) throw std::logic_error("graph: no activations before forward");
        return acts_.at(id);
    }

    /// Reverse pass from dLoss/dOutput. Fills the input gradient (unless
    /// with_input is off) and, when with_params is set, the parameter gradients.
    void backward(const Tensor<T>& output_grad, bool with_params = true, bool with_input = true) {
        if (!forwarded_) throw std::logic_error("graph: backward called before forward");
        if (output_grad.shape() != acts_[output_].shape()) {
            fail(nodes_[output_].name, "output gradient shape " + to_string(output_grad.shape()) + " does not match " +
                                           to_string(acts_[output_].shape()));
        }
        grads_.resize(nodes_.size());
        for (NodeId id = 0; id < nodes_.size(); ++id) grads_[id] = Tensor<T>(acts_[id].shape(), T{});
        std::copy(output_grad.values().begin(), output_grad.values().end(), grads_[output_].values().begin());
        param_grad_.assign(with_params ? param_total_ : 0, T{});
        has_input_grad_ = with_input;
        for (NodeId id = nodes_.size(); id-- > 1;) backward_node(id, with_params);
        has_param_grad_ = with_params;
    }

    const Tensor<T>& input_grad() const {
        if (grads_.empty() || !has_input_grad_) throw std::logic_error("graph: input gradient was not computed");
        return grads_[0];
    }

    std::span<const T> param_grad() const {
        if (!has_param_grad_) throw std::logic_error("graph: parameter gradients were not computed");
        return param_grad_;
    }

    /// Hash of every relu on/off decision and pool argmax of the last forward.
    /// Two inputs with equal signatures lie in the same linear piece.
    std::uint64_t activation_signature() const {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](std::uint64_t v) {
            h ^= v;
            h *= 1099511628211ull;
        };
        for (NodeId id = 1; id < nodes_.size(); ++id) {
            const Node& n = nodes_[id];
            if (n.kind == OpKind::Relu) {
                for (T v : acts_[n.inputs[0]].values()) mix(v > T{0});
            } else if (n.kind == OpKind::MaxPool) {
                for (auto a : argmax_[id]) mix(a);
            }
        }
        return h;
    }

private:
    const Node& node_at(NodeId id, const std::string& who) const {
        if (id >= nodes_.size()) fail(who, "unknown input node " + std::to_string(id));
        return nodes_[id];
    }
    void check_id(NodeId id, const std::string& who) const { (void)node_at(id, who); }

    [[noreturn]] static void fail(const std::string& node, const std::string& msg) {
        throw std::invalid_argument("graph node '" + node + "': " + msg);
    }

    std::string default_name(std::string name, const char* stem) const {
        return name.empty() ? std::string(stem) + "_" + std::to_string(nodes_.size()) : name;
    }

    NodeId unary(OpKind kind, NodeId x, std::string name) {
        name = default_name(std::move(name), to_string(kind));
        const Node& src = node_at(x, name);
        Node n;
        n.kind = kind;
        n.name = name;
        n.inputs = {x};
        n.sample_shape = src.sample_shape;
        return push(std::move(n));
    }

    std::size_t add_param(std::string name, Shape shape) {
        ParamInfo p;
        p.name = std::move(name);
        p.size = element_count(shape);
        p.shape = std::move(shape);
        p.offset = param_total_;
        param_total_ += p.size;
        params_.push_back(std::move(p));
        bound_ = {};
        return params_.size() - 1;
    }

    NodeId push(Node n) {
        nodes_.push_back(std::move(n));
        output_ = nodes_.size() - 1;
        forwarded_ = false;
        return output_;
    }

    Shape batched(std::size_t batch, const Shape& s) const {
        Shape out{batch};
        out.insert(out.end(), s.begin(), s.end());
        return out;
    }

    kernels::ConvGeometry conv_geometry(const Node& n, std::size_t batch) const {
        const Shape& in = nodes_[n.inputs[0]].sample_shape;
        return {batch, in[0], in[1], in[2], n.sample_shape[0], n.kernel, n.stride, n.pad};
    }

    kernels::DenseGeometry dense_geometry(const Node& n, std::size_t batch) const {
        return {batch, element_count(nodes_[n.inputs[0]].sample_shape), n.sample_shape[0]};
    }

    void forward_node(NodeId id, std::size_t batch) {
        const Node& n = nodes_[id];
        Tensor<T> out(batched(batch, n.sample_shape));
        const Tensor<T>& x = acts_[n.inputs[0]];
        switch (n.kind) {
            case OpKind::Conv2d: {
                kernels::parallel::conv2d_forward(conv_geometry(n, batch), x.data(), param_values(n.params[0]).data(),
                                                  param_values(n.params[1]).data(), out.data());
                break;
            }
            case OpKind::Dense: {
                kernels::parallel::dense_forward(dense_geometry(n, batch), x.data(), param_values(n.params[0]).data(),
                                                 param_values(n.params[1]).data(), out.data());
                break;
            }
            case OpKind::Relu:
                for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
                break;
            case OpKind::Sigmoid:
                for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>(stable_sigmoid(x[i]));
                break;
            case OpKind::MaxPool: {
                const Shape& in = nodes_[n.inputs[0]].sample_shape;
                const std::size_t c = in[0], ih = in[1], iw = in[2];
                const std::size_t oh = n.sample_shape[1], ow = n.sample_shape[2];
                auto& arg = argmax_[id];
                arg.assign(out.size(), 0);
                for (std::size_t b = 0; b < batch * c; ++b) {
                    const T* plane = x.data() + b * ih * iw;
                    for (std::size_t oy = 0; oy < oh; ++oy)
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            std::size_t best = (oy * n.stride) * iw + ox * n.stride;
                            for (std::size_t ky = 0; ky < n.kernel; ++ky)
                                for (std::size_t kx = 0; kx < n.kernel; ++kx) {
                                    const std::size_t idx = (oy * n.stride + ky) * iw + ox * n.stride + kx;
                                    if (plane[idx] > plane[best]) best = idx;
                                }
                            const std::size_t o = (b * oh + oy) * ow + ox;
                            arg[o] = static_cast<std::uint32_t>(best);
                            out[o] = plane[best];
                        }
                }
                break;
            }
            case OpKind::GlobalAvgPool: {
                const Shape& in = nodes_[n.inputs[0]].sample_shape;
                const std::size_t plane = in[1] * in[2];
                for (std::size_t b = 0; b < batch * in[0]; ++b) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < plane; ++i) acc += static_cast<double>(x[b * plane + i]);
                    out[b] = static_cast<T>(acc / static_cast<double>(plane));
                }
                break;
            }
            case OpKind::Concat: {
                const std::size_t plane = n.sample_shape[1] * n.sample_shape[2];
                for (std::size_t b = 0; b < batch; ++b) {
                    T* dst = out.data() + b * element_count(n.sample_shape);
                    for (NodeId src : n.inputs) {
                        const std::size_t count = nodes_[src].sample_shape[0] * plane;
                        const T* from = acts_[src].data() + b * count;
                        dst = std::copy(from, from + count, dst);
                    }
                }
                break;
            }
            case OpKind::SliceChannels: {
                const Shape& in = nodes_[n.inputs[0]].sample_shape;
                const std::size_t plane = in[1] * in[2];
                for (std::size_t b = 0; b < batch; ++b) {
                    const T* from = x.data() + (b * in[0] + n.begin) * plane;
                    std::copy(from, from + (n.end - n.begin) * plane, out.data() + b * (n.end - n.begin) * plane);
                }
                break;
            }
            case OpKind::Add: {
                const Tensor<T>& y = acts_[n.inputs[1]];
                for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
                break;
            }
            case OpKind::Input:
                break;
        }
        acts_[id] = std::move(out);
    }

    void backward_node(NodeId id, bool with_params) {
        const Node& n = nodes_[id];
        const Tensor<T>& g = grads_[id];
        const Tensor<T>& x = acts_[n.inputs[0]];
        Tensor<T>& gx = grads_[n.inputs[0]];
        const std::size_t batch = g.batch();
        switch (n.kind) {
            case OpKind::Conv2d: {
                const auto geo = conv_geometry(n, batch);
                const auto& wp = params_[n.params[0]];
                const auto& bp = params_[n.params[1]];
                if (with_params) {
                    kernels::parallel::conv2d_backward_params(geo, x.data(), g.data(), param_grad_.data() + wp.offset,
                                                              param_grad_.data() + bp.offset);
                }
                if (n.inputs[0] == 0 && !has_input_grad_) break;
                scratch_.assign(x.size(), T{});
                kernels::parallel::conv2d_backward_input(geo, g.data(), param_values(n.params[0]).data(), scratch_.data());
                accumulate(gx, scratch_);
                break;
            }
            case OpKind::Dense: {
                const auto geo = dense_geometry(n, batch);
                const auto& wp = params_[n.params[0]];
                const auto& bp = params_[n.params[1]];
                if (with_params) {
                    kernels::parallel::dense_backward_params(geo, x.data(), g.data(), param_grad_.data() + wp.offset,
                                                             param_grad_.data() + bp.offset);
                }
                if (n.inputs[0] == 0 && !has_input_grad_) break;
                scratch_.assign(x.size(), T{});
                kernels::parallel::dense_backward_input(geo, g.data(), param_values(n.params[0]).data(), scratch_.data());
                accumulate(gx, scratch_);
                break;
            }
            case OpKind::Relu:
                for (std::size_t i = 0; i < x.size(); ++i)
                    if (x[i] > T{0}) gx[i] += g[i];
                break;
            case OpKind::Sigmoid:
                // Derivative from the pre-activation so saturated units keep a
                // tiny but nonzero slope.
                for (std::size_t i = 0; i < x.size(); ++i) {
                    const double e = std::exp(-std::abs(static_cast<double>(x[i])));
                    const double d = e / ((1.0 + e) * (1.0 + e));
                    gx[i] += static_cast<T>(static_cast<double>(g[i]) * d);
                }
                break;
            case OpKind::MaxPool: {
                const Shape& in = nodes_[n.inputs[0]].sample_shape;
                const std::size_t iplane = in[1] * in[2];
                const std::size_t oplane = n.sample_shape[1] * n.sample_shape[2];
                const auto& arg = argmax_[id];
                for (std::size_t b = 0; b < batch * in[0]; ++b)
                    for (std::size_t o = 0; o < oplane; ++o) gx[b * iplane + arg[b * oplane + o]] += g[b * oplane + o];
                break;
            }
            case OpKind::GlobalAvgPool: {
                const Shape& in = nodes_[n.inputs[0]].sample_shape;
                const std::size_t plane = in[1] * in[2];
                const double scale = 1.0 / static_cast<double>(plane);
                for (std::size_t b = 0; b < batch * in[0]; ++b) {
                    const T v = static_cast<T>(static_cast<double>(g[b]) * scale);
                    for (std::size_t i = 0; i < plane; ++i) gx[b * plane + i] += v;
                }
                break;
            }
            case OpKind::Concat: {
                const std::size_t plane = n.sample_shape[1] * n.sample_shape[2];
                for (std::size_t b = 0; b < batch; ++b) {
                    const T* from = g.data() + b * element_count(n.sample_shape);
                    for (NodeId src : n.inputs) {
                        const std::size_t count = nodes_[src].sample_shape[0] * plane;
                        T* dst = grads_[src].data() + b * count;
                        for (std::size_t i = 0; i < count; ++i) dst[i] += from[i];
                        from += count;
                    }
                }
                break;
            }
            case OpKind::SliceChannels: {
                const Shape& in = nodes_[n.inputs[0]].sample_shape;
                const std::size_t plane = in[1] * in[2];
                const std::size_t count = (n.end - n.begin) * plane;
                for (std::size_t b = 0; b < batch; ++b) {
                    T* dst = gx.data() + (b * in[0] + n.begin) * plane;
                    const T* from = g.data() + b * count;
                    for (std::size_t i = 0; i < count; ++i) dst[i] += from[i];
                }
                break;
            }
            case OpKind::Add: {
                Tensor<T>& gy = grads_[n.inputs[1]];
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gx[i] += g[i];
                    gy[i] += g[i];
                }
                break;
            }
            case OpKind::Input:
                break;
        }
    }

    static void accumulate(Tensor<T>& dst, const std::vector<T>& src) {
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    }

    static double stable_sigmoid(T v) {
        const double z = static_cast<double>(v);
        if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
        const double e = std::exp(z);
        return e / (1.0 + e);
    }

    std::vector<Node> nodes_;
    std::vector<ParamInfo> params_;
    std::size_t param_total_ = 0;
    NodeId output_ = 0;
    std::span<const T> bound_;
    std::vector<Tensor<T>> acts_;
    std::vector<Tensor<T>> grads_;
    std::vector<std::vector<std::uint32_t>> argmax_;
    std::vector<T> param_grad_;
    std::vector<T> scratch_;
    bool forwarded_ = false;
    bool has_param_grad_ = false;
    bool has_input_grad_ = false;
};

inline const char* to_string(OpKind kind) {
    switch (kind) {
        case OpKind::Input: return "input";
        case OpKind::Dense: return "dense";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::Relu: return "relu";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::MaxPool: return "max_pool";
        case OpKind::GlobalAvgPool: return "global_avg_pool";
        case OpKind::Concat: return "concat";
        case OpKind::SliceChannels: return "slice_channels";
        case OpKind::Add: return "add";
    }
    return "?";
}

}  // namespace tl
