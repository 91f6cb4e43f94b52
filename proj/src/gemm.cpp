#include "gemm.hpp"

#include <algorithm>
#include <utility>
#include <vector>

namespace ccr::detail {
namespace {

constexpr std::size_t MR = 4;
constexpr std::size_t NR = 32;
constexpr std::size_t KC = 256;
constexpr std::size_t MC = 64;
constexpr std::size_t NC = 512;

std::size_t round_up(std::size_t v, std::size_t to) { return (v + to - 1) / to * to; }

// MR-row strips, p-major inside a strip, zero-padded past m.
void pack_a(std::size_t mc, std::size_t kc, MatView a, double* out) {
    for (std::size_t i0 = 0; i0 < mc; i0 += MR) {
        const std::size_t rows = std::min(MR, mc - i0);
        for (std::size_t p = 0; p < kc; ++p) {
            for (std::size_t r = 0; r < rows; ++r) out[p * MR + r] = a.data[(i0 + r) * a.row + p * a.col];
            for (std::size_t r = rows; r < MR; ++r) out[p * MR + r] = 0.0;
        }
        out += kc * MR;
    }
}

// NR-column strips, p-major inside a strip, zero-padded past n.
void pack_b(std::size_t kc, std::size_t nc, MatView b, double* out) {
    for (std::size_t j0 = 0; j0 < nc; j0 += NR) {
        const std::size_t cols = std::min(NR, nc - j0);
        for (std::size_t p = 0; p < kc; ++p) {
            const double* src = b.data + p * b.row + j0 * b.col;
            double* dst = out + p * NR;
            if (b.col == 1) {
                std::copy_n(src, cols, dst);
            } else {
                for (std::size_t j = 0; j < cols; ++j) dst[j] = src[j * b.col];
            }
            std::fill(dst + cols, dst + NR, 0.0);
        }
        out += kc * NR;
    }
}

// acc[MR×NR] += strip_a · strip_b, ascending p.
void micro(std::size_t kc, const double* __restrict pa, const double* __restrict pb, double* __restrict tile) {
    double acc[MR][NR];
    for (std::size_t r = 0; r < MR; ++r)
        for (std::size_t j = 0; j < NR; ++j) acc[r][j] = tile[r * NR + j];
    for (std::size_t p = 0; p < kc; ++p) {
        const double* brow = pb + p * NR;
        for (std::size_t r = 0; r < MR; ++r) {
            const double av = pa[p * MR + r];
            for (std::size_t j = 0; j < NR; ++j) acc[r][j] += av * brow[j];
        }
    }
    for (std::size_t r = 0; r < MR; ++r)
        for (std::size_t j = 0; j < NR; ++j) tile[r * NR + j] = acc[r][j];
}

void run(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, MutView c) {
    thread_local std::vector<double> abuf, bbuf;
    abuf.resize(round_up(std::min(m, MC), MR) * std::min(k, KC));
    bbuf.resize(round_up(std::min(n, NC), NR) * std::min(k, KC));
    double tile[MR * NR];

    for (std::size_t j0 = 0; j0 < n; j0 += NC) {
        const std::size_t nc = std::min(NC, n - j0);
        for (std::size_t p0 = 0; p0 < k; p0 += KC) {
            const std::size_t kc = std::min(KC, k - p0);
            pack_b(kc, nc, {b.data + p0 * b.row + j0 * b.col, b.row, b.col}, bbuf.data());
            for (std::size_t i0 = 0; i0 < m; i0 += MC) {
                const std::size_t mc = std::min(MC, m - i0);
                pack_a(mc, kc, {a.data + i0 * a.row + p0 * a.col, a.row, a.col}, abuf.data());
                for (std::size_t jr = 0; jr < nc; jr += NR) {
                    const std::size_t cols = std::min(NR, nc - jr);
                    for (std::size_t ir = 0; ir < mc; ir += MR) {
                        const std::size_t rows = std::min(MR, mc - ir);
                        double* cbase = c.data + (i0 + ir) * c.row + (j0 + jr) * c.col;
                        std::fill(tile, tile + MR * NR, 0.0);
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < cols; ++j) tile[r * NR + j] = cbase[r * c.row + j * c.col];
                        micro(kc, abuf.data() + ir * kc, bbuf.data() + jr * kc, tile);
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < cols; ++j) cbase[r * c.row + j * c.col] = tile[r * NR + j];
                    }
                }
            }
        }
    }
}

}  // namespace

void gemm(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, MutView c) {
    if (m == 0 || n == 0 || k == 0) return;
    // Lanes run along n. When n is the narrow side, compute Cᵀ = Bᵀ·Aᵀ
    // instead; the per-element summation order is the same either way.
    const std::size_t waste = round_up(m, MR) * round_up(n, NR);
    const std::size_t waste_t = round_up(n, MR) * round_up(m, NR);
    if (waste_t < waste) {
        run(n, m, k, {b.data, b.col, b.row}, {a.data, a.col, a.row}, {c.data, c.col, c.row});
    } else {
        run(m, n, k, a, b, c);
    }
}

}  // namespace ccr::detail
