#include <algorithm>
#include <string>

#include "ccr/errors.hpp"
#include "ccr/tensor.hpp"
#include "gemm.hpp"
#include "tensor_internal.hpp"

namespace ccr {

using detail::grad_sink;

std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t padding) {
    if (stride == 0) throw DimensionError("stride must be positive");
    if (k == 0 || k > in + 2 * padding)
        throw DimensionError("window " + std::to_string(k) + " does not fit input " + std::to_string(in) +
                             " with padding " + std::to_string(padding));
    return (in + 2 * padding - k) / stride + 1;
}

namespace {

struct ConvGeometry {
    std::size_t channels, height, width;
    std::size_t filters, kh, kw;
    std::size_t stride, padding;
    std::size_t out_h, out_w;

    std::size_t positions() const { return out_h * out_w; }
    std::size_t depth() const { return channels * kh * kw; }
};

// cols[p × depth]: row p holds the receptive field of output position p,
// ordered (channel, kernel row, kernel col). Padding reads as 0.
void im2col(const double* in, const ConvGeometry& g, double* cols) {
    const std::size_t depth = g.depth();
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            double* row = cols + (oy * g.out_w + ox) * depth;
            for (std::size_t c = 0; c < g.channels; ++c)
                for (std::size_t i = 0; i < g.kh; ++i) {
                    const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.padding);
                    for (std::size_t j = 0; j < g.kw; ++j) {
                        const long x = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.padding);
                        const bool inside = y >= 0 && x >= 0 && y < static_cast<long>(g.height) &&
                                            x < static_cast<long>(g.width);
                        *row++ = inside ? in[(c * g.height + static_cast<std::size_t>(y)) * g.width +
                                             static_cast<std::size_t>(x)]
                                        : 0.0;
                    }
                }
        }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* in_grad) {
    const std::size_t depth = g.depth();
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const double* row = cols + (oy * g.out_w + ox) * depth;
            for (std::size_t c = 0; c < g.channels; ++c)
                for (std::size_t i = 0; i < g.kh; ++i) {
                    const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.padding);
                    for (std::size_t j = 0; j < g.kw; ++j, ++row) {
                        const long x = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.padding);
                        if (y < 0 || x < 0 || y >= static_cast<long>(g.height) || x >= static_cast<long>(g.width))
                            continue;
                        in_grad[(c * g.height + static_cast<std::size_t>(y)) * g.width +
                                static_cast<std::size_t>(x)] += *row;
                    }
                }
        }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
    if ((input.rank() != 3 && input.rank() != 4) || kernel.rank() != 4 || bias.rank() != 1)
        throw DimensionError("conv2d: expected [N×]C×H×W input, F×C×kh×kw kernel and F bias, got " +
                             shape_str(input.shape()) + ", " + shape_str(kernel.shape()) + ", " +
                             shape_str(bias.shape()));
    const bool batched = input.rank() == 4;
    const std::size_t N = batched ? input.dim(0) : 1, lead = batched ? 1 : 0;
    if (kernel.dim(1) != input.dim(lead))
        throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " does not match input channels of " +
                             shape_str(input.shape()));
    if (bias.dim(0) != kernel.dim(0))
        throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match kernel " +
                             shape_str(kernel.shape()));

    ConvGeometry g{};
    g.channels = input.dim(lead);
    g.height = input.dim(lead + 1);
    g.width = input.dim(lead + 2);
    g.filters = kernel.dim(0);
    g.kh = kernel.dim(2);
    g.kw = kernel.dim(3);
    g.stride = stride;
    g.padding = padding;
    try {
        g.out_h = conv_out_size(g.height, g.kh, stride, padding);
        g.out_w = conv_out_size(g.width, g.kw, stride, padding);
    } catch (const DimensionError& e) {
        throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                             shape_str(input.shape()) + " (" + e.what() + ")");
    }

    const std::size_t P = g.positions(), K = g.depth(), F = g.filters, in_size = g.channels * g.height * g.width;
    // one im2col block per sample, stacked: cols[(n·P + p) × K]
    auto cols = std::make_shared<std::vector<double>>(N * P * K);
    for (std::size_t n = 0; n < N; ++n) im2col(input.data().data() + n * in_size, g, cols->data() + n * P * K);

    // wide[f][n·P + p] starts at bias[f] and accumulates the receptive field in order
    std::vector<double> wide(F * N * P);
    for (std::size_t f = 0; f < F; ++f) std::fill_n(wide.data() + f * N * P, N * P, bias.data()[f]);
    detail::gemm(F, N * P, K, {kernel.data().data(), K, 1}, {cols->data(), 1, K}, {wide.data(), N * P, 1});

    std::vector<double> out;
    if (N == 1) {
        out = std::move(wide);
    } else {
        out.resize(N * F * P);
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t n = 0; n < N; ++n)
                std::copy_n(wide.data() + (f * N + n) * P, P, out.data() + (n * F + f) * P);
    }
    Shape shape = batched ? Shape{N, F, g.out_h, g.out_w} : Shape{F, g.out_h, g.out_w};

    return detail::make_result(
        std::move(shape), std::move(out), {input, kernel, bias}, "conv2d",
        [input, kernel, bias, g, N, cols](std::span<const double> grad_out) {
            const std::size_t P = g.positions(), K = g.depth(), F = g.filters;
            const std::size_t in_size = g.channels * g.height * g.width;
            // grad_out is [n][f][p]; view it as G[f][n·P + p] without copying
            auto at = [&](std::size_t f, std::size_t n, std::size_t p) { return grad_out[(n * F + f) * P + p]; };
            if (auto db = grad_sink(bias); !db.empty())
                for (std::size_t f = 0; f < F; ++f) {
                    double acc = 0.0;
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t p = 0; p < P; ++p) acc += at(f, n, p);
                    db[f] += acc;
                }
            std::vector<double> gwide;
            const double* G = grad_out.data();
            if (N > 1) {
                gwide.resize(F * N * P);
                for (std::size_t f = 0; f < F; ++f)
                    for (std::size_t n = 0; n < N; ++n)
                        std::copy_n(grad_out.data() + (n * F + f) * P, P, gwide.data() + (f * N + n) * P);
                G = gwide.data();
            }
            if (auto dk = grad_sink(kernel); !dk.empty())
                detail::gemm(F, K, N * P, {G, N * P, 1}, {cols->data(), K, 1}, {dk.data(), K, 1});
            if (auto din = grad_sink(input); !din.empty()) {
                std::vector<double> dcols(N * P * K, 0.0);
                detail::gemm(N * P, K, F, {G, 1, N * P}, {kernel.data().data(), K, 1}, {dcols.data(), K, 1});
                for (std::size_t n = 0; n < N; ++n) col2im_add(dcols.data() + n * P * K, g, din.data() + n * in_size);
            }
        });
}

Tensor maxpool2d(const Tensor& input, std::size_t k, std::size_t stride) {
    if (input.rank() != 3 && input.rank() != 4)
        throw DimensionError("maxpool2d: expected [N×]C×H×W, got " + shape_str(input.shape()));
    const std::size_t r = input.rank();
    const std::size_t H = input.dim(r - 2), W = input.dim(r - 1), C = input.numel() / (H * W);
    if (k > H || k > W)
        throw DimensionError("maxpool2d: window " + std::to_string(k) + " larger than input " +
                             shape_str(input.shape()));
    const std::size_t oh = conv_out_size(H, k, stride, 0), ow = conv_out_size(W, k, stride, 0);
    std::vector<double> out(C * oh * ow);
    std::vector<std::size_t> arg(C * oh * ow);
    const auto x = input.data();
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = (c * H + oy * stride) * W + ox * stride;
                for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                        const std::size_t at = (c * H + oy * stride + i) * W + ox * stride + j;
                        if (x[at] > x[best]) best = at;
                    }
                const std::size_t o = (c * oh + oy) * ow + ox;
                out[o] = x[best];
                arg[o] = best;
            }
    Shape shape = input.shape();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    return detail::make_result(std::move(shape), std::move(out), {input}, "maxpool2d",
                               [input, arg = std::move(arg)](std::span<const double> g) {
                                   auto s = grad_sink(input);
                                   for (std::size_t o = 0; o < arg.size(); ++o) s[arg[o]] += g[o];
                               });
}

}  // namespace ccr
