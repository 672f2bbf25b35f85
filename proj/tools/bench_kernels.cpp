#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "transferlab/kernels.hpp"

using namespace tl::kernels;

namespace {

std::vector<float> noise(std::size_t n, unsigned seed) {
    std::mt19937 gen(seed);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v) x = u(gen);
    return v;
}

// Stem-like 3x3 convolution on a training batch.
ConvGeometry conv_shape() {
    ConvGeometry g;
    g.batch = 32;
    g.in_channels = 8;
    g.in_h = g.in_w = 32;
    g.out_channels = 8;
    g.kernel = 3;
    g.pad = 1;
    return g;
}

struct ConvData {
    ConvGeometry g = conv_shape();
    std::vector<float> in = noise(g.batch * g.in_channels * g.in_h * g.in_w, 1);
    std::vector<float> w = noise(g.weight_count(), 2);
    std::vector<float> b = noise(g.out_channels, 3);
    std::vector<float> out = std::vector<float>(g.batch * g.out_channels * g.out_h() * g.out_w());
    std::vector<float> in_grad = std::vector<float>(in.size());
    std::vector<float> w_grad = std::vector<float>(w.size());
    std::vector<float> b_grad = std::vector<float>(b.size());
};

template <bool Parallel>
void BM_conv_forward(benchmark::State& state) {
    ConvData d;
    for (auto _ : state) {
        if constexpr (Parallel)
            parallel::conv2d_forward(d.g, d.in.data(), d.w.data(), d.b.data(), d.out.data());
        else
            reference::conv2d_forward(d.g, d.in.data(), d.w.data(), d.b.data(), d.out.data());
        benchmark::DoNotOptimize(d.out.data());
    }
}

template <bool Parallel>
void BM_conv_backward(benchmark::State& state) {
    ConvData d;
    for (auto _ : state) {
        if constexpr (Parallel) {
            parallel::conv2d_backward_input(d.g, d.out.data(), d.w.data(), d.in_grad.data());
            parallel::conv2d_backward_params(d.g, d.in.data(), d.out.data(), d.w_grad.data(), d.b_grad.data());
        } else {
            reference::conv2d_backward_input(d.g, d.out.data(), d.w.data(), d.in_grad.data());
            reference::conv2d_backward_params(d.g, d.in.data(), d.out.data(), d.w_grad.data(), d.b_grad.data());
        }
        benchmark::DoNotOptimize(d.in_grad.data());
        benchmark::DoNotOptimize(d.w_grad.data());
    }
}

template <bool Parallel>
void BM_dense(benchmark::State& state) {
    DenseGeometry g{256, 512, 128};
    auto in = noise(g.batch * g.in_features, 4);
    auto w = noise(g.in_features * g.out_features, 5);
    auto b = noise(g.out_features, 6);
    std::vector<float> out(g.batch * g.out_features), in_grad(in.size()), w_grad(w.size()), b_grad(b.size());
    for (auto _ : state) {
        if constexpr (Parallel) {
            parallel::dense_forward(g, in.data(), w.data(), b.data(), out.data());
            parallel::dense_backward_input(g, out.data(), w.data(), in_grad.data());
            parallel::dense_backward_params(g, in.data(), out.data(), w_grad.data(), b_grad.data());
        } else {
            reference::dense_forward(g, in.data(), w.data(), b.data(), out.data());
            reference::dense_backward_input(g, out.data(), w.data(), in_grad.data());
            reference::dense_backward_params(g, in.data(), out.data(), w_grad.data(), b_grad.data());
        }
        benchmark::DoNotOptimize(in_grad.data());
        benchmark::DoNotOptimize(w_grad.data());
    }
}

}  // namespace

BENCHMARK(BM_conv_forward<false>)->Name("conv_forward/reference");
BENCHMARK(BM_conv_forward<true>)->Name("conv_forward/parallel");
BENCHMARK(BM_conv_backward<false>)->Name("conv_backward/reference");
BENCHMARK(BM_conv_backward<true>)->Name("conv_backward/parallel");
BENCHMARK(BM_dense<false>)->Name("dense_all/reference");
BENCHMARK(BM_dense<true>)->Name("dense_all/parallel");

BENCHMARK_MAIN();
