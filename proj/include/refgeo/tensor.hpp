#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// Every Tensor owns a shared graph node. Operations whose inputs require
// gradients record their backward closure on the result node; backward()
// linearizes the reachable graph into a ComputationTape (topological order)
// and replays it in reverse. Gradients live in the returned Gradients map,
// never on the nodes, so independent graphs that share constant or parameter
// leaves can be differentiated from different threads.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace refgeo {

using Shape = std::vector<std::size_t>;

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

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// grad_in[i] is null when inputs[i] does not need a gradient.
using BackwardFn = std::function<void(const Node& self, std::span<const double> grad_out,
                                      std::span<std::vector<double>* const> grad_in)>;

struct Node {
    Shape shape;
    std::vector<double> value;
    bool requires_grad = false;
    std::vector<NodePtr> inputs;
    BackwardFn backward;
    std::string_view op = "leaf";

    bool is_leaf() const { return inputs.empty(); }
};

}  // namespace detail

class Tensor {
   public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(data.size()));
        }
        node_ = std::make_shared<detail::Node>();
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor vector(std::vector<double> v, bool requires_grad = false) {
        const auto n = v.size();
        return Tensor({n}, std::move(v), requires_grad);
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Tensor({rows, cols}, std::move(v));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t rows() const { return node_->shape.size() == 2 ? node_->shape[0] : 1; }
    std::size_t cols() const { return node_->shape.back(); }

    std::span<const double> data() const { return node_->value; }
    std::vector<double> to_vector() const { return node_->value; }
    double operator[](std::size_t i) const { return node_->value[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

    double item() const {
        if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
        return node_->value[0];
    }

    std::vector<double> row(std::size_t r) const {
        const auto c = cols();
        auto first = node_->value.begin() + static_cast<std::ptrdiff_t>(r * c);
        return {first, first + static_cast<std::ptrdiff_t>(c)};
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }

    // Only meaningful on leaves; flipping it on an interior node would
    // desynchronize the recorded closures.
    void set_requires_grad(bool on) {
        if (!node_->is_leaf()) throw std::logic_error("set_requires_grad on a non-leaf tensor");
        node_->requires_grad = on;
    }

    // Same values, fresh constant leaf.
    Tensor detach() const { return Tensor(shape(), node_->value); }

    // Deep copy that keeps the requires_grad flag; used to fork parameters.
    Tensor clone() const { return Tensor(shape(), node_->value, requires_grad()); }

    // Leaf-only in-place update for optimizers.
    std::vector<double>& mutable_data() {
        if (!node_->is_leaf()) throw std::logic_error("mutable_data on a non-leaf tensor");
        return node_->value;
    }

    const detail::Node* id() const { return node_.get(); }
    const detail::NodePtr& node() const { return node_; }

    static Tensor from_node(detail::NodePtr n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

   private:
    detail::NodePtr node_;
};

// Records a result node; the closure is kept only when some input needs it.
inline Tensor make_result(Shape shape, std::vector<double> value, std::string_view op,
                          std::vector<Tensor> inputs, detail::BackwardFn backward) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
        n->requires_grad = true;
        n->inputs.reserve(inputs.size());
        for (auto& t : inputs) n->inputs.push_back(t.node());
        n->backward = std::move(backward);
    }
    return Tensor::from_node(std::move(n));
}

// Topologically ordered view of the nodes that lie on a gradient path to a
// scalar loss. Inputs always precede the operations that consume them.
class ComputationTape {
   public:
    static ComputationTape record(const Tensor& loss) {
        ComputationTape tape;
        if (!loss.requires_grad()) return tape;
        std::unordered_set<const detail::Node*> seen;
        // Iterative post-order DFS.
        std::vector<std::pair<const detail::Node*, std::size_t>> stack;
        stack.emplace_back(loss.id(), 0);
        seen.insert(loss.id());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->inputs.size()) {
                const detail::Node* child = node->inputs[next++].get();
                if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
            } else {
                tape.order_.push_back(node);
                stack.pop_back();
            }
        }
        for (std::size_t i = 0; i < tape.order_.size(); ++i) tape.index_[tape.order_[i]] = i;
        return tape;
    }

    std::size_t size() const { return order_.size(); }
    const std::vector<const detail::Node*>& nodes() const { return order_; }
    bool contains(const detail::Node* n) const { return index_.count(n) != 0; }
    std::size_t index_of(const detail::Node* n) const { return index_.at(n); }

   private:
    std::vector<const detail::Node*> order_;
    std::unordered_map<const detail::Node*, std::size_t> index_;
};

// Gradients of a loss with respect to every requires_grad leaf it reached.
class Gradients {
   public:
    std::vector<double> of(const Tensor& leaf) const {
        auto it = grads_.find(leaf.id());
        if (it == grads_.end()) return std::vector<double>(leaf.numel(), 0.0);
        return it->second;
    }
    bool contains(const Tensor& leaf) const { return grads_.count(leaf.id()) != 0; }
    std::size_t size() const { return grads_.size(); }

    void accumulate(const Gradients& other) {
        for (const auto& [k, g] : other.grads_) {
            auto& mine = grads_[k];
            if (mine.empty()) mine.assign(g.size(), 0.0);
            for (std::size_t i = 0; i < g.size(); ++i) mine[i] += g[i];
        }
    }

   private:
    friend Gradients backward(const Tensor& loss);
    std::unordered_map<const detail::Node*, std::vector<double>> grads_;
};

// Reverse sweep. Gradient buffers are zero-initialized per call and dropped
// afterwards except for the leaf entries returned to the caller.
inline Gradients backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward: loss must be scalar, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    Gradients out;
    if (!loss.requires_grad()) return out;
    const auto tape = ComputationTape::record(loss);
    const auto& order = tape.nodes();
    std::vector<std::vector<double>> grads(order.size());
    grads.back().assign(1, 1.0);
    std::vector<std::vector<double>*> slots;
    for (std::size_t k = order.size(); k-- > 0;) {
        const detail::Node* n = order[k];
        auto& g = grads[k];
        if (g.empty()) g.assign(n->value.size(), 0.0);
        if (n->is_leaf()) {
            out.grads_[n] = std::move(g);
            continue;
        }
        slots.assign(n->inputs.size(), nullptr);
        for (std::size_t i = 0; i < n->inputs.size(); ++i) {
            const detail::Node* in = n->inputs[i].get();
            if (!in->requires_grad) continue;
            auto& gi = grads[tape.index_of(in)];
            if (gi.empty()) gi.assign(in->value.size(), 0.0);
            slots[i] = &gi;
        }
        n->backward(*n, g, slots);
        std::vector<double>().swap(g);
    }
    return out;
}

}  // namespace refgeo
