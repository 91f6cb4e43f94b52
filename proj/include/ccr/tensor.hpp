#pragma once

// Dense float64 tensors with a reverse-mode autodiff tape.
//
// A Tensor is a shared handle: copies alias the same storage. Every op
// returns a fresh tensor; when grad recording is enabled and any input
// requires a gradient, the result carries a GradNode that knows how to
// push the output gradient back into its inputs. backward() walks the
// reachable graph once in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ccr {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;
struct TensorData;

struct GradNode {
    const char* op = "";
    std::vector<Tensor> inputs;
    // Receives the gradient of the node's output; accumulates into inputs.
    std::function<void(std::span<const double>)> backward;
};

struct TensorData {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::shared_ptr<GradNode> node;  // null for leaves

    TensorData() = default;
    TensorData(const TensorData&) = delete;
    TensorData& operator=(const TensorData&) = delete;
    // Tears down long graphs without recursing once per node.
    ~TensorData();
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor vector(std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // Direct write access, for parameter updates and test fixtures.
    std::span<double> mutable_data();
    double operator[](std::size_t i) const { return data()[i]; }
    double item() const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    // Empty span when no gradient has been accumulated yet.
    std::span<const double> grad() const;
    std::span<double> mutable_grad();  // allocates zeros on first use
    void zero_grad();

    bool is_leaf() const;
    const GradNode* node() const;

    // Populates grad on every reachable leaf that requires it.
    // Leaf gradients accumulate across calls; intermediate ones are reset.
    void backward() const;

    // Same values, no history, no grad requirement.
    Tensor detach() const;
    Tensor clone() const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    friend struct TensorAccess;
    explicit Tensor(std::shared_ptr<TensorData> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorData> impl_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// ---- elementwise / structural ops --------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor flatten(const Tensor& a);
// Concatenation along axis 0; trailing dims must agree.
Tensor concat(std::span<const Tensor> parts);
Tensor concat(std::initializer_list<Tensor> parts);
Tensor sum(const Tensor& a);
Tensor sum_squares(const Tensor& a);
// Picks rows of a 2-D table (embedding lookup).
Tensor row_select(const Tensor& table, std::span<const std::size_t> rows);
// Scalar view of one flat element.
Tensor select(const Tensor& a, std::size_t index);
// out[n] = x[n][cols[n]] for a 2-D x.
Tensor pick(const Tensor& x, std::span<const std::size_t> cols);

// ---- linear algebra / convolution ---------------------------------------

// [r×s]·[s×t] → [r×t]; a 1-D right operand of length s gives a length-r vector.
Tensor matmul(const Tensor& a, const Tensor& b);

// Affine layer on rows: x[N×in]·Wᵀ + b with W [out×in], b [out]. A 1-D x
// is a single row and gives a 1-D result. Each output starts at the bias
// and accumulates in input order.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Top-left anchored cross-correlation over a C×H×W (or batched N×C×H×W)
// input with an F×C×kh×kw kernel; out-of-range input reads as 0.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, std::size_t padding);

// Max over k×k windows of the last two dims, no padding. Ties route gradient to the first
// maximal element in row-major window order.
Tensor maxpool2d(const Tensor& input, std::size_t k, std::size_t stride);

std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride,
                          std::size_t padding);

// ---- probability ---------------------------------------------------------

// Over a vector, or over each row of a 2-D input.
Tensor log_softmax(const Tensor& z);
// log(1 - exp(a)) for log-probabilities a <= 0. a is clamped to
// -1e-12 from above so a certain prediction costs ~27.6 rather than inf.
Tensor log1m_exp(const Tensor& a);

// ---- image-specific ------------------------------------------------------

struct RowRange {
    double lo = 0.0;
    double hi = 0.0;
};

enum class RescaleGrad {
    straight_through,  // min/max of each row are constants for the gradient
    exact,             // gradient also flows through argmin/argmax
};

std::vector<RowRange> row_ranges(const Tensor& rows2d);

// Per-row affine map onto [0, target]: target·(x − lo)/(hi − lo).
// Rows with hi == lo map to all zeros with zero gradient. When `pinned`
// is given those ranges are used instead of the observed ones (and the
// gradient is the straight-through one).
Tensor minmax_rescale_rows(const Tensor& rows2d, double target, RescaleGrad mode,
                           const std::vector<RowRange>* pinned = nullptr);

// Round half away from zero; identity gradient.
Tensor round_straight_through(const Tensor& a);

}  // namespace ccr
