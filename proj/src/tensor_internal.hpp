#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ccr/tensor.hpp"

namespace ccr {

struct TensorAccess {
    static TensorData& get(const Tensor& t) { return *t.impl_; }
    static const std::shared_ptr<TensorData>& ptr(const Tensor& t) { return t.impl_; }
    static Tensor wrap(std::shared_ptr<TensorData> impl) { return Tensor(std::move(impl)); }
};

namespace detail {

using BackwardFn = std::function<void(std::span<const double>)>;

// Builds an op result, attaching a GradNode when recording is on and any
// input needs a gradient.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   const char* op, BackwardFn backward);

// True when an op over these inputs would record a node.
bool records(std::initializer_list<const Tensor*> inputs);

// Gradient buffer of t for accumulation; empty span if t needs no grad.
std::span<double> grad_sink(const Tensor& t);

}  // namespace detail
}  // namespace ccr
