#pragma once

// Dense and convolution kernels in two flavours:
//   reference:: plain nested loops, single threaded, kept as the test oracle
//   parallel::  OpenMP over independent output slices
//
// Both accumulate every output element in double with the same summation
// order (bias first, then input channel, kernel row, kernel column), so the
// two flavours agree bit for bit regardless of thread count.

#include <algorithm>
#include <cstddef>
#include <vector>

namespace tl::kernels {

struct ConvGeometry {
    std::size_t batch = 1;
    std::size_t in_channels = 1;
    std::size_t in_h = 1;
    std::size_t in_w = 1;
    std::size_t out_channels = 1;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t pad = 0;

    std::size_t out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
    std::size_t out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
    bool valid() const {
        return kernel >= 1 && stride >= 1 && kernel <= in_h + 2 * pad && kernel <= in_w + 2 * pad;
    }
    std::size_t weight_count() const { return out_channels * in_channels * kernel * kernel; }
};

struct DenseGeometry {
    std::size_t batch = 1;
    std::size_t in_features = 1;
    std::size_t out_features = 1;
};

namespace detail {

// Output index range [lo, hi) whose input coordinate o*stride + k - pad
// lands inside [0, in).
inline void valid_range(std::size_t k, std::size_t pad, std::size_t stride, std::size_t in, std::size_t out,
                        std::size_t& lo, std::size_t& hi) {
    const long long kk = static_cast<long long>(k) - static_cast<long long>(pad);
    const long long s = static_cast<long long>(stride);
    long long first = kk >= 0 ? 0 : (-kk + s - 1) / s;
    long long last = (static_cast<long long>(in) - 1 - kk);
    last = last < 0 ? -1 : last / s;
    if (last >= static_cast<long long>(out)) last = static_cast<long long>(out) - 1;
    if (first > last) {
        lo = hi = 0;
        return;
    }
    lo = static_cast<std::size_t>(first);
    hi = static_cast<std::size_t>(last) + 1;
}

}  // namespace detail

namespace reference {

template <class T>
void conv2d_forward(const ConvGeometry& g, const T* in, const T* weight, const T* bias, T* out) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t oc = 0; oc < g.out_channels; ++oc)
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    double acc = static_cast<double>(bias[oc]);
                    for (std::size_t ic = 0; ic < g.in_channels; ++ic)
                        for (std::size_t ky = 0; ky < g.kernel; ++ky)
                            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                                const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.pad);
                                const long long ix = static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long long>(g.in_h) ||
                                    ix >= static_cast<long long>(g.in_w))
                                    continue;
                                const T w = weight[((oc * g.in_channels + ic) * g.kernel + ky) * g.kernel + kx];
                                const T x = in[((n * g.in_channels + ic) * g.in_h + iy) * g.in_w + ix];
                                acc += static_cast<double>(w) * static_cast<double>(x);
                            }
                    out[((n * g.out_channels + oc) * oh + oy) * ow + ox] = static_cast<T>(acc);
                }
}

template <class T>
void conv2d_backward_input(const ConvGeometry& g, const T* out_grad, const T* weight, T* in_grad) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t ic = 0; ic < g.in_channels; ++ic)
            for (std::size_t iy = 0; iy < g.in_h; ++iy)
                for (std::size_t ix = 0; ix < g.in_w; ++ix) {
                    double acc = 0.0;
                    for (std::size_t oc = 0; oc < g.out_channels; ++oc)
                        for (std::size_t ky = 0; ky < g.kernel; ++ky)
                            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                                const long long ty = static_cast<long long>(iy + g.pad) - static_cast<long long>(ky);
                                const long long tx = static_cast<long long>(ix + g.pad) - static_cast<long long>(kx);
                                if (ty < 0 || tx < 0) continue;
                                if (ty % static_cast<long long>(g.stride) || tx % static_cast<long long>(g.stride))
                                    continue;
                                const auto oy = static_cast<std::size_t>(ty) / g.stride;
                                const auto ox = static_cast<std::size_t>(tx) / g.stride;
                                if (oy >= oh || ox >= ow) continue;
                                const T w = weight[((oc * g.in_channels + ic) * g.kernel + ky) * g.kernel + kx];
                                const T d = out_grad[((n * g.out_channels + oc) * oh + oy) * ow + ox];
                                acc += static_cast<double>(w) * static_cast<double>(d);
                            }
                    in_grad[((n * g.in_channels + ic) * g.in_h + iy) * g.in_w + ix] = static_cast<T>(acc);
                }
}

template <class T>
void conv2d_backward_params(const ConvGeometry& g, const T* in, const T* out_grad, T* weight_grad, T* bias_grad) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
        double bacc = 0.0;
        for (std::size_t n = 0; n < g.batch; ++n)
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox)
                    bacc += static_cast<double>(out_grad[((n * g.out_channels + oc) * oh + oy) * ow + ox]);
        bias_grad[oc] = static_cast<T>(bacc);
        for (std::size_t ic = 0; ic < g.in_channels; ++ic)
            for (std::size_t ky = 0; ky < g.kernel; ++ky)
                for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                    double acc = 0.0;
                    for (std::size_t n = 0; n < g.batch; ++n)
                        for (std::size_t oy = 0; oy < oh; ++oy)
                            for (std::size_t ox = 0; ox < ow; ++ox) {
                                const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.pad);
                                const long long ix = static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long long>(g.in_h) ||
                                    ix >= static_cast<long long>(g.in_w))
                                    continue;
                                acc += static_cast<double>(out_grad[((n * g.out_channels + oc) * oh + oy) * ow + ox]) *
                                       static_cast<double>(in[((n * g.in_channels + ic) * g.in_h + iy) * g.in_w + ix]);
                            }
                    weight_grad[((oc * g.in_channels + ic) * g.kernel + ky) * g.kernel + kx] = static_cast<T>(acc);
                }
    }
}

template <class T>
void dense_forward(const DenseGeometry& g, const T* in, const T* weight, const T* bias, T* out) {
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t o = 0; o < g.out_features; ++o) {
            double acc = static_cast<double>(bias[o]);
            for (std::size_t i = 0; i < g.in_features; ++i)
                acc += static_cast<double>(weight[o * g.in_features + i]) * static_cast<double>(in[n * g.in_features + i]);
            out[n * g.out_features + o] = static_cast<T>(acc);
        }
}

template <class T>
void dense_backward_input(const DenseGeometry& g, const T* out_grad, const T* weight, T* in_grad) {
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t i = 0; i < g.in_features; ++i) {
            double acc = 0.0;
            for (std::size_t o = 0; o < g.out_features; ++o)
                acc += static_cast<double>(weight[o * g.in_features + i]) *
                       static_cast<double>(out_grad[n * g.out_features + o]);
            in_grad[n * g.in_features + i] = static_cast<T>(acc);
        }
}

template <class T>
void dense_backward_params(const DenseGeometry& g, const T* in, const T* out_grad, T* weight_grad, T* bias_grad) {
    for (std::size_t o = 0; o < g.out_features; ++o) {
        double bacc = 0.0;
        for (std::size_t n = 0; n < g.batch; ++n) bacc += static_cast<double>(out_grad[n * g.out_features + o]);
        bias_grad[o] = static_cast<T>(bacc);
        for (std::size_t i = 0; i < g.in_features; ++i) {
            double acc = 0.0;
            for (std::size_t n = 0; n < g.batch; ++n)
                acc += static_cast<double>(out_grad[n * g.out_features + o]) *
                       static_cast<double>(in[n * g.in_features + i]);
            weight_grad[o * g.in_features + i] = static_cast<T>(acc);
        }
    }
}

}  // namespace reference

namespace parallel {

template <class T>
void conv2d_forward(const ConvGeometry& g, const T* in, const T* weight, const T* bias, T* out) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    const long long tasks = static_cast<long long>(g.batch * g.out_channels);
#pragma omp parallel
    {
        std::vector<double> acc(oh * ow);
#pragma omp for schedule(static)
        for (long long t = 0; t < tasks; ++t) {
            const std::size_t n = static_cast<std::size_t>(t) / g.out_channels;
            const std::size_t oc = static_cast<std::size_t>(t) % g.out_channels;
            std::fill(acc.begin(), acc.end(), static_cast<double>(bias[oc]));
            for (std::size_t ic = 0; ic < g.in_channels; ++ic) {
                const T* plane = in + (n * g.in_channels + ic) * g.in_h * g.in_w;
                for (std::size_t ky = 0; ky < g.kernel; ++ky) {
                    std::size_t y0, y1;
                    detail::valid_range(ky, g.pad, g.stride, g.in_h, oh, y0, y1);
                    for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                        std::size_t x0, x1;
                        detail::valid_range(kx, g.pad, g.stride, g.in_w, ow, x0, x1);
                        const double w = weight[((oc * g.in_channels + ic) * g.kernel + ky) * g.kernel + kx];
                        for (std::size_t oy = y0; oy < y1; ++oy) {
                            const T* row = plane + (oy * g.stride + ky - g.pad) * g.in_w;
                            double* arow = acc.data() + oy * ow;
                            if (g.stride == 1) {
                                for (std::size_t ox = x0; ox < x1; ++ox)
                                    arow[ox] += w * static_cast<double>(row[ox + kx - g.pad]);
                            } else {
                                for (std::size_t ox = x0; ox < x1; ++ox)
                                    arow[ox] += w * static_cast<double>(row[ox * g.stride + kx - g.pad]);
                            }
                        }
                    }
                }
            }
            T* dst = out + (n * g.out_channels + oc) * oh * ow;
            for (std::size_t i = 0; i < oh * ow; ++i) dst[i] = static_cast<T>(acc[i]);
        }
    }
}

template <class T>
void conv2d_backward_input(const ConvGeometry& g, const T* out_grad, const T* weight, T* in_grad) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    const long long tasks = static_cast<long long>(g.batch * g.in_channels);
#pragma omp parallel
    {
        std::vector<double> acc(g.in_h * g.in_w);
#pragma omp for schedule(static)
        for (long long t = 0; t < tasks; ++t) {
            const std::size_t n = static_cast<std::size_t>(t) / g.in_channels;
            const std::size_t ic = static_cast<std::size_t>(t) % g.in_channels;
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
                const T* dplane = out_grad + (n * g.out_channels + oc) * oh * ow;
                for (std::size_t ky = 0; ky < g.kernel; ++ky) {
                    std::size_t y0, y1;
                    detail::valid_range(ky, g.pad, g.stride, g.in_h, oh, y0, y1);
                    for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                        std::size_t x0, x1;
                        detail::valid_range(kx, g.pad, g.stride, g.in_w, ow, x0, x1);
                        const double w = weight[((oc * g.in_channels + ic) * g.kernel + ky) * g.kernel + kx];
                        for (std::size_t oy = y0; oy < y1; ++oy) {
                            double* arow = acc.data() + (oy * g.stride + ky - g.pad) * g.in_w;
                            const T* drow = dplane + oy * ow;
                            if (g.stride == 1) {
                                for (std::size_t ox = x0; ox < x1; ++ox)
                                    arow[ox + kx - g.pad] += w * static_cast<double>(drow[ox]);
                            } else {
                                for (std::size_t ox = x0; ox < x1; ++ox)
                                    arow[ox * g.stride + kx - g.pad] += w * static_cast<double>(drow[ox]);
                            }
                        }
                    }
                }
            }
            T* dst = in_grad + (n * g.in_channels + ic) * g.in_h * g.in_w;
            for (std::size_t i = 0; i < g.in_h * g.in_w; ++i) dst[i] = static_cast<T>(acc[i]);
        }
    }
}

template <class T>
void conv2d_backward_params(const ConvGeometry& g, const T* in, const T* out_grad, T* weight_grad, T* bias_grad) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    const long long tasks = static_cast<long long>(g.out_channels * g.in_channels);
#pragma omp parallel for schedule(static)
    for (long long t = 0; t < tasks; ++t) {
        const std::size_t oc = static_cast<std::size_t>(t) / g.in_channels;
        const std::size_t ic = static_cast<std::size_t>(t) % g.in_channels;
        if (ic == 0) {
            double bacc = 0.0;
            for (std::size_t n = 0; n < g.batch; ++n) {
                const T* dplane = out_grad + (n * g.out_channels + oc) * oh * ow;
                for (std::size_t i = 0; i < oh * ow; ++i) bacc += static_cast<double>(dplane[i]);
            }
            bias_grad[oc] = static_cast<T>(bacc);
        }
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            std::size_t y0, y1;
            detail::valid_range(ky, g.pad, g.stride, g.in_h, oh, y0, y1);
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                std::size_t x0, x1;
                detail::valid_range(kx, g.pad, g.stride, g.in_w, ow, x0, x1);
                double acc = 0.0;
                for (std::size_t n = 0; n < g.batch; ++n) {
                    const T* plane = in + (n * g.in_channels + ic) * g.in_h * g.in_w;
                    const T* dplane = out_grad + (n * g.out_channels + oc) * oh * ow;
                    for (std::size_t oy = y0; oy < y1; ++oy) {
                        const T* row = plane + (oy * g.stride + ky - g.pad) * g.in_w;
                        const T* drow = dplane + oy * ow;
                        for (std::size_t ox = x0; ox < x1; ++ox)
                            acc += static_cast<double>(drow[ox]) * static_cast<double>(row[ox * g.stride + kx - g.pad]);
                    }
                }
                weight_grad[((oc * g.in_channels + ic) * g.kernel + ky) * g.kernel + kx] = static_cast<T>(acc);
            }
        }
    }
}

template <class T>
void dense_forward(const DenseGeometry& g, const T* in, const T* weight, const T* bias, T* out) {
    const long long tasks = static_cast<long long>(g.batch * g.out_features);
#pragma omp parallel for schedule(static)
    for (long long t = 0; t < tasks; ++t) {
        const std::size_t n = static_cast<std::size_t>(t) / g.out_features;
        const std::size_t o = static_cast<std::size_t>(t) % g.out_features;
        const T* w = weight + o * g.in_features;
        const T* x = in + n * g.in_features;
        double acc = static_cast<double>(bias[o]);
        for (std::size_t i = 0; i < g.in_features; ++i) acc += static_cast<double>(w[i]) * static_cast<double>(x[i]);
        out[n * g.out_features + o] = static_cast<T>(acc);
    }
}

template <class T>
void dense_backward_input(const DenseGeometry& g, const T* out_grad, const T* weight, T* in_grad) {
#pragma omp parallel
    {
        std::vector<double> acc(g.in_features);
#pragma omp for schedule(static)
        for (long long nn = 0; nn < static_cast<long long>(g.batch); ++nn) {
            const auto n = static_cast<std::size_t>(nn);
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t o = 0; o < g.out_features; ++o) {
                const double d = out_grad[n * g.out_features + o];
                const T* w = weight + o * g.in_features;
                for (std::size_t i = 0; i < g.in_features; ++i) acc[i] += static_cast<double>(w[i]) * d;
            }
            for (std::size_t i = 0; i < g.in_features; ++i) in_grad[n * g.in_features + i] = static_cast<T>(acc[i]);
        }
    }
}

template <class T>
void dense_backward_params(const DenseGeometry& g, const T* in, const T* out_grad, T* weight_grad, T* bias_grad) {
#pragma omp parallel
    {
        std::vector<double> acc(g.in_features);
#pragma omp for schedule(static)
        for (long long oo = 0; oo < static_cast<long long>(g.out_features); ++oo) {
            const auto o = static_cast<std::size_t>(oo);
            std::fill(acc.begin(), acc.end(), 0.0);
            double bacc = 0.0;
            for (std::size_t n = 0; n < g.batch; ++n) {
                const double d = out_grad[n * g.out_features + o];
                bacc += d;
                const T* x = in + n * g.in_features;
                for (std::size_t i = 0; i < g.in_features; ++i) acc[i] += d * static_cast<double>(x[i]);
            }
            bias_grad[o] = static_cast<T>(bacc);
            for (std::size_t i = 0; i < g.in_features; ++i) weight_grad[o * g.in_features + i] = static_cast<T>(acc[i]);
        }
    }
}

}  // namespace parallel

}  // namespace tl::kernels
