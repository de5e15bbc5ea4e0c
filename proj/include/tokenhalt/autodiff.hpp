#pragma once

// Reverse-mode autodiff over dense f64 tensors.
//
// A Var is a handle to a graph node. Ops allocate a fresh node holding the
// forward value and a closure that, given the node's accumulated gradient,
// adds the vector-Jacobian product into each parent that requires a grad.
// backward() replays closures in reverse topological order.

#include "tokenhalt/tensor.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tokenhalt::ad {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::string op;
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;

    bool has_grad() const { return grad.size() == value.size() && grad.shape() == value.shape(); }
    Tensor& grad_buffer();
    void accumulate(std::span<const double> g);
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    /// Accumulated gradient; zeros of value's shape if nothing was accumulated.
    Tensor grad() const;
    bool has_grad() const;
    void zero_grad();

    /// Replaces the leaf value in place (optimizer updates).
    Tensor& mutable_value() { return node_->value; }

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& ptr() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node> node_;
};

/// Leaf that never receives a gradient.
Var constant(Tensor value);
/// Leaf that accumulates gradients.
Var parameter(Tensor value);

/// Creates an op result. Verifies finiteness; attaches `fn` only when some
/// parent requires a gradient.
Var make_result(std::string op, Tensor value, std::vector<Var> parents, BackwardFn fn);

/// Populates grads of every reachable requires_grad node. Root must hold one element.
void backward(const Var& root);

// Custom backward rule: the forward result is produced by `forward`, and
// during backward `rule` maps (upstream grad, saved inputs) to one grad per
// input, bypassing autodiff of the forward computation.
using CustomForward = std::function<Tensor(std::span<const Tensor>)>;
using CustomRule = std::function<std::vector<Tensor>(const Tensor& upstream, std::span<const Tensor> inputs)>;
Var custom(std::string name, std::vector<Var> inputs, const CustomForward& forward, CustomRule rule);

// ---- primitive ops ---------------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
/// a[m,n] + bias[n] broadcast over rows.
Var add_bias(const Var& a, const Var& bias);
/// scale * a + shift, elementwise.
Var affine(const Var& a, double scale, double shift = 0.0);
/// a[m,n] * w[m] broadcast over columns.
Var scale_rows(const Var& a, const Var& w);

Var exp(const Var& a);
Var log(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
Var clamp(const Var& a, double lo, double hi);
Var maximum(const Var& a, const Var& b);

Var sum(const Var& a);
Var mean(const Var& a);
/// 2-D reduction: axis 0 -> [n], axis 1 -> [m].
Var sum_axis(const Var& a, int axis);

Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice_cols(const Var& a, std::size_t start, std::size_t count);
Var gather_rows(const Var& a, std::span<const std::uint32_t> index);
/// out[index[r]] += a[r]; out has `rows` rows.
Var scatter_rows(const Var& a, std::span<const std::uint32_t> index, std::size_t rows);

/// tokens[N,C] -> grid[C,H,W], token r lands at flat cell index cells[r] (y*W+x).
Var scatter_to_grid(const Var& tokens, std::span<const std::uint32_t> cells, std::size_t height, std::size_t width);
/// grid[C,H,W] -> tokens[N,C].
Var gather_from_grid(const Var& grid, std::span<const std::uint32_t> cells);

Var softmax_rows(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

/// x[Cin,H,W], w[Cout,Cin,3,3], b[Cout]; zero padding 1; stride 1 or 2.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride);
/// Nearest-neighbour resize of x[C,h,w] to [C,height,width].
Var upsample_nearest(const Var& x, std::size_t height, std::size_t width);

// ---- verification harness --------------------------------------------------

using GraphBuilder = std::function<Var(std::span<const Var>)>;

/// Max over every input entry of |autodiff - central difference| /
/// max(|central difference|, 1e-8).
double grad_check(const GraphBuilder& fn, const std::vector<Tensor>& inputs, double h = 1e-6);

}  // namespace tokenhalt::ad
