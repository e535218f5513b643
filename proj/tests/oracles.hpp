#pragma once

// Independent reference implementations used as test oracles. Everything
// here is deliberately naive (triple loops, explicit formulas) and stays
// decoupled from the library's compute paths.

#include <cmath>
#include <vector>

#include "samcl/rng.hpp"
#include "samcl/tensor.hpp"

namespace oracles {

inline samcl::Tensor random_tensor(samcl::Shape shape, samcl::Rng& rng, double scale = 1.0) {
    samcl::Tensor t = samcl::Tensor::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, scale);
    return t;
}

// C = A * B by the definition, no blocking, no reuse of library kernels.
inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                        std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t l = 0; l < k; ++l) acc += a[i * k + l] * b[l * n + j];
            c[i * n + j] = acc;
        }
    }
    return c;
}

// [B,H,W,D] -> [B,D] by explicit quadruple loop.
inline std::vector<double> loop_mean_pool(const std::vector<double>& x, std::size_t b,
                                          std::size_t h, std::size_t w, std::size_t d) {
    std::vector<double> out(b * d, 0.0);
    for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t xx = 0; xx < w; ++xx) {
                for (std::size_t j = 0; j < d; ++j) {
                    out[bi * d + j] += x[((bi * h + y) * w + xx) * d + j];
                }
            }
        }
        for (std::size_t j = 0; j < d; ++j) out[bi * d + j] /= static_cast<double>(h * w);
    }
    return out;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

inline double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::fabs(a[i] - b[i]) / std::max(1.0, std::fabs(a[i])));
    }
    return m;
}

// Dense evaluation of Y = W X + B C (A X + P) in the row-vector layout,
// term by term, using only naive products.
inline std::vector<double> dense_aug_forward(const std::vector<double>& w, std::size_t d_out,
                                             std::size_t d_in, const std::vector<double>& x,
                                             std::size_t tokens, const std::vector<double>& a,
                                             std::size_t r, const std::vector<double>& b,
                                             const std::vector<double>& c,
                                             const std::vector<double>& p) {
    // X [tokens, d_in] * W^T -> transpose W by swapping index roles.
    std::vector<double> wt(d_in * d_out), at(d_in * r), ct(r * r), bt(r * d_out);
    for (std::size_t i = 0; i < d_out; ++i)
        for (std::size_t j = 0; j < d_in; ++j) wt[j * d_out + i] = w[i * d_in + j];
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d_in; ++j) at[j * r + i] = a[i * d_in + j];
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j) ct[j * r + i] = c[i * r + j];
    for (std::size_t i = 0; i < d_out; ++i)
        for (std::size_t j = 0; j < r; ++j) bt[j * d_out + i] = b[i * r + j];

    std::vector<double> base = naive_matmul(x, wt, tokens, d_in, d_out);
    std::vector<double> low = naive_matmul(x, at, tokens, d_in, r);
    for (std::size_t i = 0; i < low.size(); ++i) low[i] += p[i];
    std::vector<double> mixed = naive_matmul(low, ct, tokens, r, r);
    std::vector<double> delta = naive_matmul(mixed, bt, tokens, r, d_out);
    for (std::size_t i = 0; i < base.size(); ++i) base[i] += delta[i];
    return base;
}

} // namespace oracles
