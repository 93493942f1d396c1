#include "hbrnet/tensor.hpp"

#include <unordered_set>
#include <utility>

namespace hbrnet::ad {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) {
            s += ",";
        }
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace {
thread_local bool t_grad_enabled = true;

void check_shape(const Shape& shape) {
    for (auto d : shape) {
        if (d == 0) {
            throw ShapeError("tensor shape " + shape_str(shape) + " has a zero dimension");
        }
    }
}
}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
    check_shape(shape);
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, Buffer<T> data, bool requires_grad)
    : node_(std::make_shared<Node<T>>()) {
    check_shape(shape);
    if (data.size() != shape_numel(shape)) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return Tensor(node_->shape, node_->data, false);
}

template <typename T>
void Tensor<T>::backward() {
    if (numel() != 1) {
        throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    }
    if (!node_->requires_grad) {
        throw std::logic_error("backward(): loss does not depend on any parameter");
    }
    // iterative post-order DFS gives a topological order
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node<T>* p = n->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward) {
            for (auto& p : n->parents) {
                if (p->requires_grad) {
                    p->ensure_grad();
                }
            }
            n->backward(*n);
        }
    }
    // consume the graph: interior nodes drop closures, parents and grads
    for (Node<T>* n : order) {
        if (n->backward) {
            n->backward = nullptr;
            n->parents.clear();
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> data,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool needs = false;
    if (t_grad_enabled) {
        for (const auto& p : parents) {
            if (p->requires_grad) {
                needs = true;
                break;
            }
        }
    }
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return Tensor<T>::from_node(std::move(node));
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result(Shape, Buffer<float>, std::vector<std::shared_ptr<Node<float>>>,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(Shape, Buffer<double>,
                                    std::vector<std::shared_ptr<Node<double>>>,
                                    std::function<void(Node<double>&)>);

}  // namespace hbrnet::ad
