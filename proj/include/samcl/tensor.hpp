#pragma once

// Dense 64-bit tensors with reverse-mode automatic differentiation.
//
// Values are row-major. Recording happens only while a GradTape is active
// on the current thread (TapeScope); without one, every op is a plain
// computation, which is the inference fast path. Gradients accumulate on
// the leaf tensors that were marked requires_grad.
//
// There is no implicit broadcasting: the only mixed-shape ops are the
// explicit scalar and row-vector variants. Every op validates shapes and
// throws dimension_error naming both offenders.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "samcl/errors.hpp"
#include "samcl/rng.hpp"

namespace samcl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until touched by backward/zero_grad
    bool requires_grad = false;

    std::size_t size() const { return data.size(); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

// ---- raw GEMM kernels -------------------------------------------------
// C[m,n] (+)= A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        if (!accumulate) {
            for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
        }
        const double* ai = a + i * k;
        for (std::size_t l = 0; l < k; ++l) {
            const double ail = ai[l];
            const double* bl = b + l * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
        }
    }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T. B is transposed into a scratch buffer so
// the inner loops stay in the vectorizable saxpy form of gemm_nn.
inline void gemm_nt(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    std::vector<double> bt(k * n);
    for (std::size_t j = 0; j < n; ++j) {
        const double* bj = b + j * k;
        for (std::size_t l = 0; l < k; ++l) bt[l * n + j] = bj[l];
    }
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        if (!accumulate) {
            for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
        }
        const double* ai = a + i * k;
        for (std::size_t l = 0; l < k; ++l) {
            const double ail = ai[l];
            const double* bl = bt.data() + l * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
        }
    }
}

// C[k,n] (+)= A[m,k]^T * B[m,n]
inline void gemm_tn(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (!accumulate) {
        for (std::size_t i = 0; i < k * n; ++i) c[i] = 0.0;
    }
    for (std::size_t l = 0; l < m; ++l) {
        const double* al = a + l * k;
        const double* bl = b + l * n;
        for (std::size_t i = 0; i < k; ++i) {
            const double ali = al[i];
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += ali * bl[j];
        }
    }
}

} // namespace detail

class GradTape;

namespace detail {
GradTape*& active_tape_slot();
} // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.node_ = std::make_shared<detail::Node>();
        t.node_->shape = std::move(shape);
        t.node_->data.assign(shape_numel(t.node_->shape), 0.0);
        return t;
    }

    static Tensor full(Shape shape, double value) {
        Tensor t = zeros(std::move(shape));
        for (double& v : t.node_->data) v = value;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<double> values) {
        if (shape_numel(shape) != values.size()) {
            throw dimension_error("Tensor::from_data: shape " + shape_str(shape) +
                                  " does not hold " + std::to_string(values.size()) + " values");
        }
        Tensor t;
        t.node_ = std::make_shared<detail::Node>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(values);
        return t;
    }

    static Tensor scalar(double value) { return from_data({1}, {value}); }

    static Tensor randn(Shape shape, Rng& rng, double stddev) {
        Tensor t = zeros(std::move(shape));
        for (double& v : t.node_->data) v = rng.normal(0.0, stddev);
        return t;
    }

    static Tensor identity(std::size_t n) {
        Tensor t = zeros({n, n});
        for (std::size_t i = 0; i < n; ++i) t.node_->data[i * n + i] = 1.0;
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return check().shape; }
    std::size_t rank() const { return check().shape.size(); }
    std::size_t dim(std::size_t i) const { return check().shape.at(i); }
    std::size_t size() const { return check().data.size(); }

    double* data() { return check().data.data(); }
    const double* data() const { return check().data.data(); }
    std::vector<double>& values() { return check().data; }
    const std::vector<double>& values() const { return check().data; }

    double item() const {
        if (size() != 1) {
            throw dimension_error("Tensor::item: tensor " + shape_str(shape()) + " is not scalar");
        }
        return check().data[0];
    }

    double at(std::initializer_list<std::size_t> idx) const {
        const auto& s = shape();
        if (idx.size() != s.size()) {
            throw dimension_error("Tensor::at: rank mismatch for " + shape_str(s));
        }
        std::size_t flat = 0, i = 0;
        for (std::size_t v : idx) {
            flat = flat * s[i] + v;
            ++i;
        }
        return check().data[flat];
    }

    bool requires_grad() const { return check().requires_grad; }
    Tensor& set_requires_grad(bool on) {
        check().requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !check().grad.empty(); }
    const std::vector<double>& grad() const {
        if (check().grad.empty()) throw state_error("Tensor::grad: no gradient recorded");
        return check().grad;
    }
    void zero_grad() {
        check().ensure_grad();
        for (double& g : check().grad) g = 0.0;
    }

    // Same underlying storage (not value equality).
    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    std::shared_ptr<detail::Node> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    detail::Node& check() const {
        if (!node_) throw state_error("Tensor: undefined tensor used");
        return *node_;
    }
    std::shared_ptr<detail::Node> node_;
};

// Ordered record of backward closures. Creation order is topological, so
// running entries in reverse propagates every gradient exactly once.
class GradTape {
public:
    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    void record(std::shared_ptr<detail::Node> output, std::function<void()> backward) {
        entries_.push_back({std::move(output), std::move(backward)});
    }

    std::size_t recorded_ops() const { return entries_.size(); }

    void backward(const Tensor& loss) {
        if (loss.size() != 1) {
            throw dimension_error("GradTape::backward: loss " + shape_str(loss.shape()) + " is not scalar");
        }
        if (!std::isfinite(loss.item())) {
            throw numeric_error("GradTape::backward: loss is not finite");
        }
        auto root = loss.node();
        root->ensure_grad();
        root->grad[0] += 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (!it->output->grad.empty()) it->backward();
        }
    }

    void clear() { entries_.clear(); }

private:
    struct Entry {
        std::shared_ptr<detail::Node> output;
        std::function<void()> backward;
    };
    std::vector<Entry> entries_;
};

namespace detail {
inline GradTape*& active_tape_slot() {
    thread_local GradTape* tape = nullptr;
    return tape;
}
} // namespace detail

inline GradTape* active_tape() { return detail::active_tape_slot(); }

// Activates recording for the lifetime of the scope (per thread).
class TapeScope {
public:
    explicit TapeScope(GradTape& tape) : previous_(detail::active_tape_slot()) {
        detail::active_tape_slot() = &tape;
    }
    ~TapeScope() { detail::active_tape_slot() = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    GradTape* previous_;
};

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (!active_tape_slot()) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

inline void mark_result(Tensor& out, bool track, std::function<void()> backward) {
    if (track) {
        out.set_requires_grad(true);
        active_tape_slot()->record(out.node(), std::move(backward));
    }
}

inline void accumulate(const std::shared_ptr<Node>& node, const std::vector<double>& delta) {
    node->ensure_grad();
    for (std::size_t i = 0; i < delta.size(); ++i) node->grad[i] += delta[i];
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw dimension_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                              " vs " + shape_str(b.shape()));
    }
}

} // namespace detail

// ---- matrix products ---------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw dimension_error("matmul: incompatible shapes " + shape_str(a.shape()) +
                              " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    detail::gemm_nn(a.data(), b.data(), out.data(), m, k, n, false);
    const bool track = detail::tracking({&a, &b});
    detail::mark_result(out, track, [an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
        if (an->requires_grad) {
            an->ensure_grad();
            detail::gemm_nt(on->grad.data(), bn->data.data(), an->grad.data(), m, n, k, true);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            detail::gemm_tn(an->data.data(), on->grad.data(), bn->grad.data(), m, k, n, true);
        }
    });
    return out;
}

// a[m,k] * b[n,k]^T -> [m,n]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        throw dimension_error("matmul_nt: incompatible shapes " + shape_str(a.shape()) +
                              " x " + shape_str(b.shape()) + "^T");
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out = Tensor::zeros({m, n});
    detail::gemm_nt(a.data(), b.data(), out.data(), m, k, n, false);
    const bool track = detail::tracking({&a, &b});
    detail::mark_result(out, track, [an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
        if (an->requires_grad) {
            an->ensure_grad();
            detail::gemm_nn(on->grad.data(), bn->data.data(), an->grad.data(), m, n, k, true);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            detail::gemm_tn(on->grad.data(), an->data.data(), bn->grad.data(), m, n, k, true);
        }
    });
    return out;
}

// ---- elementwise -------------------------------------------------------

namespace detail {

template <typename Fwd, typename Bwd>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
    require_same_shape(a, b, name);
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.size();
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    const bool track = tracking({&a, &b});
    mark_result(out, track, [an = a.node(), bn = b.node(), on = out.node(), bwd, n] {
        for (std::size_t i = 0; i < n; ++i) {
            const double g = on->grad[i];
            double da = 0.0, db = 0.0;
            bwd(an->data[i], bn->data[i], g, da, db);
            if (an->requires_grad) {
                an->ensure_grad();
                an->grad[i] += da;
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                bn->grad[i] += db;
            }
        }
    });
    return out;
}

template <typename Fwd, typename Deriv>
Tensor unary_elementwise(const Tensor& x, Fwd fwd, Deriv deriv) {
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = x.size();
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    const bool track = tracking({&x});
    mark_result(out, track, [xn = x.node(), on = out.node(), deriv, n] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) xn->grad[i] += on->grad[i] * deriv(xn->data[i]);
    });
    return out;
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double, double g, double& da, double& db) {
            da = g;
            db = g;
        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double, double g, double& da, double& db) {
            da = g;
            db = -g;
        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double x, double y, double g, double& da, double& db) {
            da = g * y;
            db = g * x;
        });
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(
        a, b, "divide", [](double x, double y) { return x / y; },
        [](double x, double y, double g, double& da, double& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

inline Tensor scalar_mul(const Tensor& x, double s) {
    return detail::unary_elementwise(
        x, [s](double v) { return v * s; }, [s](double) { return s; });
}

inline Tensor scalar_add(const Tensor& x, double s) {
    return detail::unary_elementwise(
        x, [s](double v) { return v + s; }, [](double) { return 1.0; });
}

namespace detail {
inline constexpr double kInvSqrt2 = 0.7071067811865475244;
inline constexpr double kInvSqrt2Pi = 0.3989422804014326779;
} // namespace detail

inline Tensor gelu(const Tensor& x) {
    return detail::unary_elementwise(
        x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * detail::kInvSqrt2)); },
        [](double v) {
            const double cdf = 0.5 * (1.0 + std::erf(v * detail::kInvSqrt2));
            return cdf + v * detail::kInvSqrt2Pi * std::exp(-0.5 * v * v);
        });
}

inline Tensor sigmoid(const Tensor& x) {
    auto sig = [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); };
    return detail::unary_elementwise(
        x, sig, [sig](double v) {
            const double s = sig(v);
            return s * (1.0 - s);
        });
}

inline Tensor softplus(const Tensor& x) {
    auto sig = [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); };
    return detail::unary_elementwise(
        x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::fabs(v))); }, sig);
}

// ---- shape ops ----------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size()) {
        throw dimension_error("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    Tensor out = Tensor::from_data(std::move(shape), x.values());
    const bool track = detail::tracking({&x});
    detail::mark_result(out, track, [xn = x.node(), on = out.node()] {
        if (xn->requires_grad) detail::accumulate(xn, on->grad);
    });
    return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    if (x.rank() != 2 || c0 >= c1 || c1 > x.dim(1)) {
        throw dimension_error("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) +
                              ") for " + shape_str(x.shape()));
    }
    const std::size_t m = x.dim(0), n = x.dim(1), w = c1 - c0;
    Tensor out = Tensor::zeros({m, w});
    for (std::size_t i = 0; i < m; ++i) {
        const double* src = x.data() + i * n + c0;
        double* dst = out.data() + i * w;
        for (std::size_t j = 0; j < w; ++j) dst[j] = src[j];
    }
    const bool track = detail::tracking({&x});
    detail::mark_result(out, track, [xn = x.node(), on = out.node(), m, n, w, c0] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            double* dst = xn->grad.data() + i * n + c0;
            const double* src = on->grad.data() + i * w;
            for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
        }
    });
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw validation_error("concat_cols: empty input");
    const std::size_t m = parts[0].dim(0);
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(0) != m) {
            throw dimension_error("concat_cols: row mismatch " + shape_str(parts[0].shape()) +
                                  " vs " + shape_str(p.shape()));
        }
        total += p.dim(1);
    }
    Tensor out = Tensor::zeros({m, total});
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < m; ++i) {
            const double* src = p.data() + i * w;
            double* dst = out.data() + i * total + off;
            for (std::size_t j = 0; j < w; ++j) dst[j] = src[j];
        }
        off += w;
    }
    bool track = false;
    if (active_tape()) {
        for (const Tensor& p : parts) track = track || p.requires_grad();
    }
    std::vector<std::shared_ptr<detail::Node>> pnodes;
    std::vector<std::size_t> widths;
    for (const Tensor& p : parts) {
        pnodes.push_back(p.node());
        widths.push_back(p.dim(1));
    }
    detail::mark_result(out, track, [pnodes, widths, on = out.node(), m, total] {
        std::size_t off2 = 0;
        for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
            const std::size_t w = widths[pi];
            if (pnodes[pi]->requires_grad) {
                pnodes[pi]->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    double* dst = pnodes[pi]->grad.data() + i * w;
                    const double* src = on->grad.data() + i * total + off2;
                    for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
                }
            }
            off2 += w;
        }
    });
    return out;
}

// ---- broadcast-style helpers (explicit, no general broadcasting) --------

inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    if (x.rank() != 2 || v.rank() != 1 || v.dim(0) != x.dim(1)) {
        throw dimension_error("add_rowvec: " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
    }
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* px = x.data() + i * n;
        double* po = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) po[j] = px[j] + v.data()[j];
    }
    const bool track = detail::tracking({&x, &v});
    detail::mark_result(out, track, [xn = x.node(), vn = v.node(), on = out.node(), m, n] {
        if (xn->requires_grad) detail::accumulate(xn, on->grad);
        if (vn->requires_grad) {
            vn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                const double* g = on->grad.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) vn->grad[j] += g[j];
            }
        }
    });
    return out;
}

// Scales each row of x by the matching entry of v[m].
inline Tensor mul_colvec(const Tensor& x, const Tensor& v) {
    if (x.rank() != 2 || v.rank() != 1 || v.dim(0) != x.dim(0)) {
        throw dimension_error("mul_colvec: " + shape_str(x.shape()) + " * " + shape_str(v.shape()));
    }
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double s = v.data()[i];
        const double* px = x.data() + i * n;
        double* po = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) po[j] = px[j] * s;
    }
    const bool track = detail::tracking({&x, &v});
    detail::mark_result(out, track, [xn = x.node(), vn = v.node(), on = out.node(), m, n] {
        for (std::size_t i = 0; i < m; ++i) {
            const double* g = on->grad.data() + i * n;
            if (xn->requires_grad) {
                xn->ensure_grad();
                const double s = vn->data[i];
                double* dx = xn->grad.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) dx[j] += g[j] * s;
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                const double* px = xn->data.data() + i * n;
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += g[j] * px[j];
                vn->grad[i] += acc;
            }
        }
    });
    return out;
}

// ---- reductions ----------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    Tensor out = Tensor::zeros({1});
    double acc = 0.0;
    const double* px = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) acc += px[i];
    out.data()[0] = acc;
    const bool track = detail::tracking({&x});
    detail::mark_result(out, track, [xn = x.node(), on = out.node()] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double g = on->grad[0];
        for (double& v : xn->grad) v += g;
    });
    return out;
}

inline Tensor mean(const Tensor& x) {
    const double inv = 1.0 / static_cast<double>(x.size());
    return scalar_mul(sum(x), inv);
}

// [T,D] -> [1,D] column means.
inline Tensor mean_rows(const Tensor& x) {
    if (x.rank() != 2) {
        throw dimension_error("mean_rows: expected rank-2, got " + shape_str(x.shape()));
    }
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros({1, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* px = x.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) out.data()[j] += px[j];
    }
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t j = 0; j < n; ++j) out.data()[j] *= inv;
    const bool track = detail::tracking({&x});
    detail::mark_result(out, track, [xn = x.node(), on = out.node(), m, n, inv] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            double* dx = xn->grad.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) dx[j] += on->grad[j] * inv;
        }
    });
    return out;
}

// [B,H,W,D] -> [B,D] spatial mean.
inline Tensor mean_pool_hw(const Tensor& x) {
    if (x.rank() != 4) {
        throw dimension_error("mean_pool_hw: expected rank-4 [B,H,W,D], got " + shape_str(x.shape()));
    }
    const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), d = x.dim(3);
    const std::size_t hw = h * w;
    const double inv = 1.0 / static_cast<double>(hw);
    Tensor out = Tensor::zeros({b, d});
    for (std::size_t bi = 0; bi < b; ++bi) {
        double* po = out.data() + bi * d;
        const double* px = x.data() + bi * hw * d;
        for (std::size_t s = 0; s < hw; ++s) {
            for (std::size_t j = 0; j < d; ++j) po[j] += px[s * d + j];
        }
        for (std::size_t j = 0; j < d; ++j) po[j] *= inv;
    }
    const bool track = detail::tracking({&x});
    detail::mark_result(out, track, [xn = x.node(), on = out.node(), b, hw, d, inv] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t bi = 0; bi < b; ++bi) {
            const double* g = on->grad.data() + bi * d;
            double* dx = xn->grad.data() + bi * hw * d;
            for (std::size_t s = 0; s < hw; ++s) {
                for (std::size_t j = 0; j < d; ++j) dx[s * d + j] += g[j] * inv;
            }
        }
    });
    return out;
}

// ---- normalization & attention pieces ------------------------------------

inline Tensor softmax_rows(const Tensor& x) {
    if (x.rank() != 2) {
        throw dimension_error("softmax_rows: expected rank-2, got " + shape_str(x.shape()));
    }
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* px = x.data() + i * n;
        double* po = out.data() + i * n;
        double mx = px[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, px[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            po[j] = std::exp(px[j] - mx);
            denom += po[j];
        }
        const double inv = 1.0 / denom;
        for (std::size_t j = 0; j < n; ++j) po[j] *= inv;
    }
    const bool track = detail::tracking({&x});
    detail::mark_result(out, track, [xn = x.node(), on = out.node(), m, n] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            const double* y = on->data.data() + i * n;
            const double* g = on->grad.data() + i * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
            double* dx = xn->grad.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (g[j] - dot);
        }
    });
    return out;
}

inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              double eps = 1e-5) {
    if (x.rank() != 2 || gamma.rank() != 1 || beta.rank() != 1 ||
        gamma.dim(0) != x.dim(1) || beta.dim(0) != x.dim(1)) {
        throw dimension_error("layer_norm_rows: " + shape_str(x.shape()) + " with gamma " +
                              shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
    }
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros({m, n});
    std::vector<double> inv_std(m), means(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* px = x.data() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += px[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double c = px[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        means[i] = mu;
        inv_std[i] = inv;
        double* po = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            po[j] = (px[j] - mu) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    const bool track = detail::tracking({&x, &gamma, &beta});
    detail::mark_result(out, track,
                        [xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node(),
                         means, inv_std, m, n] {
        const double invn = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
            const double* px = xn->data.data() + i * n;
            const double* g = on->grad.data() + i * n;
            const double mu = means[i];
            const double inv = inv_std[i];
            if (gn->requires_grad || bn->requires_grad) {
                if (gn->requires_grad) gn->ensure_grad();
                if (bn->requires_grad) bn->ensure_grad();
                for (std::size_t j = 0; j < n; ++j) {
                    const double xhat = (px[j] - mu) * inv;
                    if (gn->requires_grad) gn->grad[j] += g[j] * xhat;
                    if (bn->requires_grad) bn->grad[j] += g[j];
                }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double xhat = (px[j] - mu) * inv;
                    const double dxhat = g[j] * gn->data[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                double* dx = xn->grad.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) {
                    const double xhat = (px[j] - mu) * inv;
                    const double dxhat = g[j] * gn->data[j];
                    dx[j] += inv * (dxhat - invn * sum_dxhat - xhat * invn * sum_dxhat_xhat);
                }
            }
        }
    });
    return out;
}

// Mean cross entropy over rows of logits[N,C] against integer labels.
inline Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw dimension_error("cross_entropy_logits: logits " + shape_str(logits.shape()) + " with " +
                              std::to_string(labels.size()) + " labels");
    }
    const std::size_t m = logits.dim(0), c = logits.dim(1);
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= c) {
            throw validation_error("cross_entropy_logits: label " + std::to_string(l) + " out of range");
        }
    }
    Tensor out = Tensor::zeros({1});
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double* px = logits.data() + i * c;
        double mx = px[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, px[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) denom += std::exp(px[j] - mx);
        total += std::log(denom) + mx - px[static_cast<std::size_t>(labels[i])];
    }
    out.data()[0] = total / static_cast<double>(m);
    const bool track = detail::tracking({&logits});
    detail::mark_result(out, track, [xn = logits.node(), on = out.node(), labels, m, c] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double scale = on->grad[0] / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i) {
            const double* px = xn->data.data() + i * c;
            double mx = px[0];
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, px[j]);
            double denom = 0.0;
            for (std::size_t j = 0; j < c; ++j) denom += std::exp(px[j] - mx);
            double* dx = xn->grad.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) {
                const double p = std::exp(px[j] - mx) / denom;
                dx[j] += scale * (p - (static_cast<std::size_t>(labels[i]) == j ? 1.0 : 0.0));
            }
        }
    });
    return out;
}

// Token grid [T, p*p] -> pixel grid [gh*p, gw*p]; token t covers patch
// (t / gw, t % gw), values in row-major order inside the patch.
inline Tensor depatchify(const Tensor& x, std::size_t gh, std::size_t gw, std::size_t p) {
    if (x.rank() != 2 || x.dim(0) != gh * gw || x.dim(1) != p * p) {
        throw dimension_error("depatchify: tokens " + shape_str(x.shape()) + " vs grid " +
                              std::to_string(gh) + "x" + std::to_string(gw) + " patch " + std::to_string(p));
    }
    const std::size_t hpix = gh * p, wpix = gw * p;
    Tensor out = Tensor::zeros({hpix, wpix});
    for (std::size_t t = 0; t < gh * gw; ++t) {
        const std::size_t gy = t / gw, gx = t % gw;
        const double* src = x.data() + t * p * p;
        for (std::size_t py = 0; py < p; ++py) {
            double* dst = out.data() + (gy * p + py) * wpix + gx * p;
            for (std::size_t px_ = 0; px_ < p; ++px_) dst[px_] = src[py * p + px_];
        }
    }
    const bool track = detail::tracking({&x});
    detail::mark_result(out, track, [xn = x.node(), on = out.node(), gh, gw, p, wpix] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t t = 0; t < gh * gw; ++t) {
            const std::size_t gy = t / gw, gx = t % gw;
            double* dst = xn->grad.data() + t * p * p;
            for (std::size_t py = 0; py < p; ++py) {
                const double* src = on->grad.data() + (gy * p + py) * wpix + gx * p;
                for (std::size_t px_ = 0; px_ < p; ++px_) dst[py * p + px_] += src[px_];
            }
        }
    });
    return out;
}

// ---- operators -----------------------------------------------------------

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scalar_mul(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return scalar_mul(a, s); }

// ---- gradient checking -----------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
template <typename F>
double grad_check(F&& f, Tensor x, double eps) {
    if (eps <= 0.0) throw validation_error("grad_check: eps must be positive");
    x.set_requires_grad(true);
    x.zero_grad();
    {
        GradTape tape;
        TapeScope scope(tape);
        Tensor y = f(static_cast<const Tensor&>(x));
        tape.backward(y);
    }
    const std::vector<double> analytic = x.grad();

    double max_rel = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x.data()[i];
        x.data()[i] = orig + eps;
        const double up = f(static_cast<const Tensor&>(x)).item();
        x.data()[i] = orig - eps;
        const double down = f(static_cast<const Tensor&>(x)).item();
        x.data()[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw numeric_error("grad_check: function produced non-finite values");
        }
        const double numeric = (up - down) / (2.0 * eps);
        const double rel = std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(analytic[i]));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

} // namespace samcl
