#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hbrnet::ad {

using Shape = std::vector<std::size_t>;

/// Allocator with a fixed 64-byte alignment. Vectorized kernels peel
/// differently per pointer alignment, so a fixed alignment keeps the
/// floating-point summation order, and hence results, run to run.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Thrown for every shape or argument contract violation in the engine.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

template <typename T>
struct Node {
    Shape shape;
    Buffer<T> data;
    Buffer<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Pushes this node's grad into its parents' grads.
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), T(0));
        }
    }
};

/// Handle to a node of the reverse-mode graph. Copies share the node.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false);
    Tensor(Shape shape, Buffer<T> data, bool requires_grad = false);
    Tensor(Shape shape, const std::vector<T>& data, bool requires_grad = false)
        : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad) {}

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    Buffer<T>& storage() { return node_->data; }
    const Buffer<T>& storage() const { return node_->data; }

    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    std::span<T> grad() { return node_->grad; }
    std::span<const T> grad() const { return node_->grad; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }
    void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }

    T item() const;
    T& operator[](std::size_t i) { return node_->data[i]; }
    T operator[](std::size_t i) const { return node_->data[i]; }

    /// New leaf holding a copy of the data, outside any graph.
    Tensor detach() const;
    Tensor clone() const { return detach(); }

    /// Reverse sweep from a scalar. Leaf grads accumulate; interior nodes
    /// of the graph are released afterwards.
    void backward();

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

    static Tensor from_node(std::shared_ptr<Node<T>> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Graph recording is on by default; NoGradGuard disables it for the thread.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Builds the result node. Parents and the backward closure are kept only
/// when grad mode is on and some parent requires a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> data,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward);

}  // namespace hbrnet::ad
