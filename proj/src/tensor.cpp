#include "ccr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "ccr/errors.hpp"
#include "gemm.hpp"
#include "tensor_internal.hpp"

namespace ccr {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    for (std::size_t d : shape)
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
        throw DimensionError("shape " + shape_str(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    auto impl = std::make_shared<TensorData>();
    impl->shape = std::move(shape);
    impl->value = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
    const std::size_t n = values.size();
    return from({n}, std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= impl_->shape.size())
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(impl_->shape));
    return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->value.size(); }

std::span<const double> Tensor::data() const { return impl_->value; }
std::span<double> Tensor::mutable_data() { return impl_->value; }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->value[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
    if (!is_leaf()) throw ContractError("requires_grad can only be changed on leaf tensors");
    impl_->requires_grad = on;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::mutable_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

bool Tensor::is_leaf() const { return impl_->node == nullptr; }
const GradNode* Tensor::node() const { return impl_->node.get(); }

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorData>();
    impl->shape = impl_->shape;
    impl->value = impl_->value;
    return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
    Tensor t = detach();
    t.impl_->requires_grad = impl_->requires_grad && is_leaf();
    return t;
}

void Tensor::backward() const {
    if (numel() != 1)
        throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
    if (!impl_->requires_grad)
        throw ContractError("backward() on a tensor that does not require grad");

    // Post-order DFS: inputs precede the tensors computed from them.
    std::vector<TensorData*> order;
    std::unordered_set<const TensorData*> seen;
    struct Frame {
        TensorData* t;
        std::size_t next_input;
    };
    std::vector<Frame> stack{{impl_.get(), 0}};
    seen.insert(impl_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.t->node && f.next_input < f.t->node->inputs.size()) {
            TensorData* in = &TensorAccess::get(f.t->node->inputs[f.next_input++]);
            if (in->requires_grad && seen.insert(in).second) stack.push_back({in, 0});
            continue;
        }
        order.push_back(f.t);
        stack.pop_back();
    }

    for (TensorData* t : order)
        if (t->node) t->grad.assign(t->value.size(), 0.0);
    if (impl_->grad.empty()) impl_->grad.assign(1, 0.0);
    impl_->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorData* t = *it;
        if (t->node) t->node->backward(t->grad);
    }
    for (TensorData* t : order)
        if (t->node) std::vector<double>().swap(t->grad);
}

// ---- op plumbing --------------------------------------------------------------

TensorData::~TensorData() {
    if (!node || node.use_count() != 1) return;
    std::vector<std::shared_ptr<GradNode>> pending;
    pending.push_back(std::move(node));
    while (!pending.empty()) {
        std::shared_ptr<GradNode> n = std::move(pending.back());
        pending.pop_back();
        std::vector<Tensor> inputs = std::move(n->inputs);
        // the closure's captured handles go first; `inputs` keeps them alive
        n->backward = nullptr;
        n.reset();
        for (Tensor& t : inputs) {
            const auto& impl = TensorAccess::ptr(t);
            if (impl.use_count() == 1 && impl->node && impl->node.use_count() == 1)
                pending.push_back(std::move(impl->node));
        }
    }
}

namespace detail {

bool records(std::initializer_list<const Tensor*> inputs) {
    if (!g_grad_enabled) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, const char* op,
                   BackwardFn backward) {
    auto impl = std::make_shared<TensorData>();
    impl->shape = std::move(shape);
    impl->value = std::move(values);
    const bool any = g_grad_enabled &&
                     std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
        impl->requires_grad = true;
        auto node = std::make_shared<GradNode>();
        node->op = op;
        node->inputs = std::move(inputs);
        node->backward = std::move(backward);
        impl->node = std::move(node);
    }
    return TensorAccess::wrap(std::move(impl));
}

std::span<double> grad_sink(const Tensor& t) {
    TensorData& d = TensorAccess::get(t);
    if (!d.requires_grad) return {};
    if (d.grad.empty()) d.grad.assign(d.value.size(), 0.0);
    return d.grad;
}

}  // namespace detail

using detail::grad_sink;
using detail::make_result;

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

// ---- elementwise ----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return make_result(a.shape(), std::move(out), {a, b}, "add", [a, b](std::span<const double> g) {
        for (const Tensor* t : {&a, &b}) {
            auto s = grad_sink(*t);
            for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return make_result(a.shape(), std::move(out), {a, b}, "sub", [a, b](std::span<const double> g) {
        auto sa = grad_sink(a);
        for (std::size_t i = 0; i < sa.size(); ++i) sa[i] += g[i];
        auto sb = grad_sink(b);
        for (std::size_t i = 0; i < sb.size(); ++i) sb[i] -= g[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return make_result(a.shape(), std::move(out), {a, b}, "mul", [a, b](std::span<const double> g) {
        auto sa = grad_sink(a);
        for (std::size_t i = 0; i < sa.size(); ++i) sa[i] += g[i] * b[i];
        auto sb = grad_sink(b);
        for (std::size_t i = 0; i < sb.size(); ++i) sb[i] += g[i] * a[i];
    });
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
    return make_result(a.shape(), std::move(out), {a}, "scale", [a, factor](std::span<const double> g) {
        auto s = grad_sink(a);
        for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * factor;
    });
}

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
    return make_result(a.shape(), std::move(out), {a}, "relu", [a](std::span<const double> g) {
        auto s = grad_sink(a);
        for (std::size_t i = 0; i < s.size(); ++i)
            if (a[i] > 0.0) s[i] += g[i];
    });
}

Tensor round_straight_through(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::round(a[i]);
    return make_result(a.shape(), std::move(out), {a}, "round_st", [a](std::span<const double> g) {
        auto s = grad_sink(a);
        for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
    });
}

// ---- structural ------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    return make_result(std::move(shape), to_vec(a.data()), {a}, "reshape", [a](std::span<const double> g) {
        auto s = grad_sink(a);
        for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
    });
}

Tensor flatten(const Tensor& a) { return reshape(a, {a.numel()}); }

Tensor concat(std::initializer_list<Tensor> parts) {
    return concat(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor concat(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::size_t rows = 0;
    std::vector<double> out;
    for (const Tensor& p : parts) {
        Shape t(p.shape().begin() + 1, p.shape().end());
        if (t != tail)
            throw DimensionError("concat: trailing dims differ, " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(p.shape()));
        rows += p.dim(0);
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    Shape shape{rows};
    shape.insert(shape.end(), tail.begin(), tail.end());
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return make_result(std::move(shape), std::move(out), inputs, "concat",
                       [inputs](std::span<const double> g) {
                           std::size_t offset = 0;
                           for (const Tensor& p : inputs) {
                               auto s = grad_sink(p);
                               for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[offset + i];
                               offset += p.numel();
                           }
                       });
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    return make_result({1}, {acc}, {a}, "sum", [a](std::span<const double> g) {
        auto s = grad_sink(a);
        for (double& v : s) v += g[0];
    });
}

Tensor sum_squares(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v * v;
    return make_result({1}, {acc}, {a}, "sum_squares", [a](std::span<const double> g) {
        auto s = grad_sink(a);
        const double two_g = 2.0 * g[0];
        for (std::size_t i = 0; i < s.size(); ++i) s[i] += two_g * a[i];
    });
}

Tensor row_select(const Tensor& table, std::span<const std::size_t> rows) {
    if (table.rank() != 2) throw DimensionError("row_select: table must be 2-D, got " + shape_str(table.shape()));
    const std::size_t width = table.dim(1);
    std::vector<double> out;
    out.reserve(rows.size() * width);
    for (std::size_t r : rows) {
        if (r >= table.dim(0))
            throw DimensionError("row_select: row " + std::to_string(r) + " outside " + shape_str(table.shape()));
        auto src = table.data().subspan(r * width, width);
        out.insert(out.end(), src.begin(), src.end());
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return make_result({rows.size(), width}, std::move(out), {table}, "row_select",
                       [table, idx, width](std::span<const double> g) {
                           auto s = grad_sink(table);
                           for (std::size_t k = 0; k < idx.size(); ++k)
                               for (std::size_t j = 0; j < width; ++j) s[idx[k] * width + j] += g[k * width + j];
                       });
}

Tensor select(const Tensor& a, std::size_t index) {
    if (index >= a.numel())
        throw DimensionError("select: index " + std::to_string(index) + " outside " + shape_str(a.shape()));
    return make_result({1}, {a[index]}, {a}, "select", [a, index](std::span<const double> g) {
        auto s = grad_sink(a);
        if (!s.empty()) s[index] += g[0];
    });
}

Tensor pick(const Tensor& x, std::span<const std::size_t> cols) {
    if (x.rank() != 2 || cols.size() != x.dim(0))
        throw DimensionError("pick: " + std::to_string(cols.size()) + " indices for " + shape_str(x.shape()));
    const std::size_t width = x.dim(1);
    std::vector<std::size_t> at(cols.size());
    std::vector<double> out(cols.size());
    for (std::size_t n = 0; n < cols.size(); ++n) {
        if (cols[n] >= width)
            throw DimensionError("pick: index " + std::to_string(cols[n]) + " outside " + shape_str(x.shape()));
        at[n] = n * width + cols[n];
        out[n] = x[at[n]];
    }
    return make_result({cols.size()}, std::move(out), {x}, "pick", [x, at = std::move(at)](std::span<const double> g) {
        auto s = grad_sink(x);
        for (std::size_t n = 0; n < at.size(); ++n) s[at[n]] += g[n];
    });
}

// ---- matmul ------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || (b.rank() != 2 && b.rank() != 1))
        throw DimensionError("matmul: expected 2-D × 2-D or 2-D × 1-D, got " + shape_str(a.shape()) + " × " +
                             shape_str(b.shape()));
    const std::size_t r = a.dim(0), s = a.dim(1);
    const bool vec = b.rank() == 1;
    const std::size_t t = vec ? 1 : b.dim(1);
    if (b.dim(0) != s)
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " × " +
                             shape_str(b.shape()));
    std::vector<double> out(r * t, 0.0);
    detail::gemm_acc(r, t, s, a.data().data(), s, b.data().data(), t, out.data(), t);
    Shape shape = vec ? Shape{r} : Shape{r, t};
    return make_result(std::move(shape), std::move(out), {a, b}, "matmul",
                       [a, b, r, s, t](std::span<const double> g) {
                           // dA += G·Bᵀ, dB += Aᵀ·G
                           if (auto da = grad_sink(a); !da.empty())
                               detail::gemm(r, s, t, {g.data(), t, 1}, {b.data().data(), 1, t}, {da.data(), s, 1});
                           if (auto db = grad_sink(b); !db.empty())
                               detail::gemm(s, t, r, {a.data().data(), 1, s}, {g.data(), t, 1}, {db.data(), t, 1});
                       });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if ((x.rank() != 1 && x.rank() != 2) || weight.rank() != 2 || bias.rank() != 1)
        throw DimensionError("linear: expected rows, a 2-D weight and a 1-D bias, got " + shape_str(x.shape()) +
                             ", " + shape_str(weight.shape()) + ", " + shape_str(bias.shape()));
    const std::size_t n = x.rank() == 1 ? 1 : x.dim(0), in = x.dim(x.rank() - 1), out_dim = weight.dim(0);
    if (weight.dim(1) != in || bias.dim(0) != out_dim)
        throw DimensionError("linear: " + shape_str(x.shape()) + " against weight " + shape_str(weight.shape()) +
                             " and bias " + shape_str(bias.shape()));
    std::vector<double> out(n * out_dim);
    for (std::size_t r = 0; r < n; ++r) std::copy_n(bias.data().data(), out_dim, out.data() + r * out_dim);
    detail::gemm(n, out_dim, in, {x.data().data(), in, 1}, {weight.data().data(), 1, in}, {out.data(), out_dim, 1});
    Shape shape = x.rank() == 1 ? Shape{out_dim} : Shape{n, out_dim};
    return make_result(std::move(shape), std::move(out), {x, weight, bias}, "linear",
                       [x, weight, bias, n, in, out_dim](std::span<const double> g) {
                           if (auto dx = grad_sink(x); !dx.empty())
                               detail::gemm(n, in, out_dim, {g.data(), out_dim, 1}, {weight.data().data(), in, 1},
                                            {dx.data(), in, 1});
                           if (auto dw = grad_sink(weight); !dw.empty())
                               detail::gemm(out_dim, in, n, {g.data(), 1, out_dim}, {x.data().data(), in, 1},
                                            {dw.data(), in, 1});
                           if (auto db = grad_sink(bias); !db.empty())
                               for (std::size_t r = 0; r < n; ++r)
                                   for (std::size_t j = 0; j < out_dim; ++j) db[j] += g[r * out_dim + j];
                       });
}

// ---- probability ---------------------------------------------------------------------

Tensor log_softmax(const Tensor& z) {
    if (z.rank() != 1 && z.rank() != 2)
        throw DimensionError("log_softmax: expected a vector or rows, got " + shape_str(z.shape()));
    const std::size_t m = z.dim(z.rank() - 1), rows = z.numel() / m;
    std::vector<double> out(z.numel()), probs(z.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        auto zr = z.data().subspan(r * m, m);
        const double zmax = *std::max_element(zr.begin(), zr.end());
        double total = 0.0;
        for (double v : zr) total += std::exp(v - zmax);
        const double log_total = std::log(total);
        for (std::size_t i = 0; i < m; ++i) {
            out[r * m + i] = zr[i] - zmax - log_total;
            probs[r * m + i] = std::exp(out[r * m + i]);
        }
    }
    return make_result(z.shape(), std::move(out), {z}, "log_softmax",
                       [z, m, rows, probs = std::move(probs)](std::span<const double> g) {
                           auto s = grad_sink(z);
                           for (std::size_t r = 0; r < rows; ++r) {
                               double gsum = 0.0;
                               for (std::size_t i = 0; i < m; ++i) gsum += g[r * m + i];
                               for (std::size_t i = 0; i < m; ++i)
                                   s[r * m + i] += g[r * m + i] - probs[r * m + i] * gsum;
                           }
                       });
}

Tensor log1m_exp(const Tensor& a) {
    constexpr double kCeil = -1e-12;
    const double ln2 = std::log(2.0);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = std::min(a[i], kCeil);
        out[i] = v > -ln2 ? std::log(-std::expm1(v)) : std::log1p(-std::exp(v));
    }
    return make_result(a.shape(), std::move(out), {a}, "log1m_exp", [a](std::span<const double> g) {
        auto s = grad_sink(a);
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (a[i] > kCeil) continue;
            // d/da log(1 − e^a) = e^a / expm1(a)
            s[i] += g[i] * std::exp(a[i]) / std::expm1(a[i]);
        }
    });
}

// ---- per-row min-max rescale -------------------------------------------------------------

std::vector<RowRange> row_ranges(const Tensor& rows2d) {
    if (rows2d.rank() != 2) throw DimensionError("row_ranges: expected 2-D, got " + shape_str(rows2d.shape()));
    const std::size_t rows = rows2d.dim(0), cols = rows2d.dim(1);
    std::vector<RowRange> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        auto row = rows2d.data().subspan(r * cols, cols);
        auto [lo, hi] = std::minmax_element(row.begin(), row.end());
        out[r] = {*lo, *hi};
    }
    return out;
}

Tensor minmax_rescale_rows(const Tensor& rows2d, double target, RescaleGrad mode,
                           const std::vector<RowRange>* pinned) {
    if (rows2d.rank() != 2)
        throw DimensionError("minmax_rescale_rows: expected 2-D, got " + shape_str(rows2d.shape()));
    const std::size_t rows = rows2d.dim(0), cols = rows2d.dim(1);
    if (pinned && pinned->size() != rows)
        throw DimensionError("minmax_rescale_rows: " + std::to_string(pinned->size()) + " pinned ranges for " +
                             std::to_string(rows) + " rows");
    const std::vector<RowRange> ranges = pinned ? *pinned : row_ranges(rows2d);
    const bool exact = mode == RescaleGrad::exact && pinned == nullptr;

    // argmin / argmax: first occurrence
    std::vector<std::size_t> argmin(rows, 0), argmax(rows, 0);
    std::vector<double> out(rows * cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        auto row = rows2d.data().subspan(r * cols, cols);
        argmin[r] = static_cast<std::size_t>(std::min_element(row.begin(), row.end()) - row.begin());
        argmax[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        const double span = ranges[r].hi - ranges[r].lo;
        if (!(span > 0.0)) continue;
        for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = target * (row[j] - ranges[r].lo) / span;
    }
    return make_result(
        rows2d.shape(), std::move(out), {rows2d}, "minmax_rescale_rows",
        [rows2d, ranges, argmin, argmax, rows, cols, target, exact](std::span<const double> g) {
            auto s = grad_sink(rows2d);
            for (std::size_t r = 0; r < rows; ++r) {
                const double lo = ranges[r].lo, hi = ranges[r].hi, span = hi - lo;
                if (!(span > 0.0)) continue;
                const double k = target / span;
                auto x = rows2d.data().subspan(r * cols, cols);
                for (std::size_t j = 0; j < cols; ++j) s[r * cols + j] += k * g[r * cols + j];
                if (!exact) continue;
                double to_lo = 0.0, to_hi = 0.0;
                for (std::size_t j = 0; j < cols; ++j) {
                    to_lo += g[r * cols + j] * (x[j] - hi);
                    to_hi -= g[r * cols + j] * (x[j] - lo);
                }
                s[r * cols + argmin[r]] += to_lo * k / span;
                s[r * cols + argmax[r]] += to_hi * k / span;
            }
        });
}

}  // namespace ccr
