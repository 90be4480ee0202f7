#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lmdet/errors.hpp"

namespace lmdet {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool shape_eq(const Shape& a, const Shape& b);

template <class T>
struct Node;

/// Dense row-major tensor. Values are treated as immutable once an op has
/// consumed them; only the grad buffer accumulates. Copies alias storage.
template <class T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<T>>(shape_numel(t.shape_), T(0));
        return t;
    }

    static Tensor full(Shape shape, T value) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : *t.data_) v = value;
        return t;
    }

    static Tensor scalar(T value) { return full({1}, value); }

    static Tensor from(Shape shape, std::vector<T> values) {
        if (shape_numel(shape) != values.size())
            throw ShapeError("tensor from: " + shape_str(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<T>>(std::move(values));
        return t;
    }

    /// Leaf with requires_grad set; used for parameters.
    static Tensor param(Shape shape, std::vector<T> values) {
        Tensor t = from(std::move(shape), std::move(values));
        t.set_requires_grad(true);
        return t;
    }

    bool defined() const { return static_cast<bool>(data_); }
    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::size_t size() const { return data_ ? data_->size() : 0; }

    const T* data() const { return data_->data(); }
    T* data() { return data_->data(); }
    const std::vector<T>& values() const { return *data_; }
    std::vector<T>& values() { return *data_; }
    T item() const {
        if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape_));
        return (*data_)[0];
    }

    bool requires_grad() const { return requires_grad_; }

    /// Copies alias storage, so the grad buffer must exist before any op
    /// stores a copy of this tensor in a node; enabling grad allocates it.
    void set_requires_grad(bool v) {
        requires_grad_ = v;
        if (v) grad();
    }

    /// Grad buffer, allocated zeroed on first access.
    std::vector<T>& grad() {
        if (!grad_) grad_ = std::make_shared<std::vector<T>>(size(), T(0));
        return *grad_;
    }
    const std::vector<T>* grad_if_any() const { return grad_ ? grad_.get() : nullptr; }
    void zero_grad() {
        if (grad_)
            std::fill(grad_->begin(), grad_->end(), T(0));
    }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

    // Used by op implementations when recording the graph.
    void attach_node(std::shared_ptr<Node<T>> n) {
        node_ = std::move(n);
        requires_grad_ = true;
    }
    std::shared_ptr<std::vector<T>> grad_storage() {
        grad();
        return grad_;
    }
    std::shared_ptr<std::vector<T>> data_storage() const { return data_; }

    /// Fresh tensor over the same data storage with a different shape
    /// (row-major layout is unchanged, so no copy is needed). Grad buffer and
    /// node are NOT carried over; ops that need a differentiable reshape go
    /// through ops::reshape.
    Tensor aliased_with_shape(Shape shape) const {
        if (shape_numel(shape) != size())
            throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                             ": element count mismatch");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    /// Deep copy of values only (no grad, no node).
    Tensor clone_values() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<T>>(*data_);
        return t;
    }

private:
    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;
    std::shared_ptr<std::vector<T>> grad_;
    std::shared_ptr<Node<T>> node_;
    bool requires_grad_ = false;
};

/// One recorded primitive op: inputs it consumed plus the rule that routes
/// the output's grad buffer into the inputs' grad buffers.
template <class T>
struct Node {
    const char* op = "";
    std::vector<Tensor<T>> inputs;
    Shape out_shape;
    std::shared_ptr<std::vector<T>> out_grad;
    std::function<void(Node<T>&)> backward;
};

/// Reverse-topological record of the ops reachable from one root tensor.
template <class T>
struct Graph {
    std::vector<Node<T>*> order;  // forward topological order
    static Graph build(const Tensor<T>& root);
};

/// Scoped switch that disables graph recording (inference / target building).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_recording_enabled();

/// Backpropagate from a scalar loss: every parameter leaf reachable from it
/// receives dloss/dparam in its grad buffer (accumulating).
template <class T>
void backward(const Tensor<T>& loss);

/// Drop the graph hanging off `root` without recursing through the node
/// chain (deep models would otherwise unwind the whole graph on the stack
/// when the loss tensor dies).
template <class T>
void release_graph(const Tensor<T>& root);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template struct Graph<float>;
extern template struct Graph<double>;
extern template void backward(const Tensor<float>&);
extern template void backward(const Tensor<double>&);
extern template void release_graph(const Tensor<float>&);
extern template void release_graph(const Tensor<double>&);

}  // namespace lmdet
