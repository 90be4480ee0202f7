#include "lmdet/tensor.hpp"

#include <unordered_set>

namespace lmdet {

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

bool shape_eq(const Shape& a, const Shape& b) { return a == b; }

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_recording_enabled() { return g_grad_enabled; }

template <class T>
Graph<T> Graph<T>::build(const Tensor<T>& root) {
    Graph<T> g;
    if (!root.node()) return g;

    // Iterative post-order DFS; each node enters `order` exactly once.
    std::unordered_set<const Node<T>*> visited;
    struct Frame {
        Node<T>* node;
        std::size_t next_child;
    };
    std::vector<Frame> stack;
    stack.push_back({root.node().get(), 0});
    visited.insert(root.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        bool descended = false;
        while (f.next_child < f.node->inputs.size()) {
            const auto& child = f.node->inputs[f.next_child++].node();
            if (child && !visited.count(child.get())) {
                visited.insert(child.get());
                stack.push_back({child.get(), 0});
                descended = true;
                break;
            }
        }
        if (!descended && f.next_child >= f.node->inputs.size()) {
            g.order.push_back(f.node);
            stack.pop_back();
        }
    }
    return g;
}

template <class T>
void backward(const Tensor<T>& loss) {
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.node()) return;  // constant loss: nothing reachable

    Tensor<T> root = loss;
    if (!root.node()->out_grad)
        throw ContractError("backward: loss node has no grad buffer");
    (*root.node()->out_grad)[0] = T(1);

    Graph<T> g = Graph<T>::build(root);
    for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward) n->backward(*n);
    }
}

template <class T>
void release_graph(const Tensor<T>& root) {
    if (!root.node()) return;
    Graph<T> g = Graph<T>::build(root);

    // Pin every node first so clearing one node's inputs cannot free another
    // node still sitting in `order`.
    std::vector<std::shared_ptr<Node<T>>> pinned;
    pinned.reserve(g.order.size());
    for (Node<T>* n : g.order)
        for (const auto& in : n->inputs)
            if (in.node()) pinned.push_back(in.node());
    for (Node<T>* n : g.order) {
        n->inputs.clear();
        n->backward = nullptr;
    }
    // pinned drains here; with inputs cleared each node frees without
    // recursing into its producers.
}

template class Tensor<float>;
template class Tensor<double>;
template struct Graph<float>;
template struct Graph<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);
template void release_graph(const Tensor<float>&);
template void release_graph(const Tensor<double>&);

}  // namespace lmdet
