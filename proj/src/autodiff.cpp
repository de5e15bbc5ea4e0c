#include "tokenhalt/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <unordered_set>

namespace tokenhalt::ad {

Tensor& Node::grad_buffer() {
    if (!has_grad()) grad = Tensor(value.shape(), 0.0);
    return grad;
}

void Node::accumulate(std::span<const double> g) {
    Tensor& buf = grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

Tensor Var::grad() const {
    if (node_->has_grad()) return node_->grad;
    return Tensor(node_->value.shape(), 0.0);
}

bool Var::has_grad() const { return node_->has_grad(); }

void Var::zero_grad() { node_->grad = Tensor(); }

Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = "constant";
    return Var(std::move(n));
}

Var parameter(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = "parameter";
    n->requires_grad = true;
    return Var(std::move(n));
}

Var make_result(std::string op, Tensor value, std::vector<Var> parents, BackwardFn fn) {
    const auto& d = value.vec();
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!std::isfinite(d[i])) throw NumericError(op, i);
    }
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = std::move(op);
    for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
    if (n->requires_grad) {
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.ptr());
        n->backward = std::move(fn);
    }
    return Var(std::move(n));
}

void backward(const Var& root) {
    if (root.size() != 1) throw ShapeError("backward", "root " + shape_str(root.shape()) + " is not scalar");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS gives a topological order without recursion depth limits.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->has_grad()) n->backward(*n);
    }
}

Var custom(std::string name, std::vector<Var> inputs, const CustomForward& forward, CustomRule rule) {
    std::vector<Tensor> values;
    values.reserve(inputs.size());
    for (const auto& v : inputs) values.push_back(v.value());
    Tensor out = forward(values);
    std::vector<Var> parents = inputs;
    const std::string op = name;
    return make_result(std::move(name), std::move(out), parents,
                       [inputs, values = std::move(values), rule = std::move(rule), op](Node& self) {
                           std::vector<Tensor> grads = rule(self.grad, values);
                           if (grads.size() != inputs.size()) {
                               throw ShapeError(op, "custom backward returned " + std::to_string(grads.size()) +
                                                        " grads for " + std::to_string(inputs.size()) + " inputs");
                           }
                           for (std::size_t i = 0; i < inputs.size(); ++i) {
                               if (grads[i].shape() != values[i].shape()) {
                                   throw ShapeError(op, "custom grad " + std::to_string(i) + " has shape " +
                                                            shape_str(grads[i].shape()) + ", input is " +
                                                            shape_str(values[i].shape()));
                               }
                               if (inputs[i].requires_grad()) inputs[i].node()->accumulate(grads[i].data());
                           }
                       });
}

namespace {

void require(bool ok, const char* op, const std::string& detail) {
    if (!ok) throw ShapeError(op, detail);
}

void same_shape(const char* op, const Var& a, const Var& b) {
    require(a.shape() == b.shape(), op, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_rank(const char* op, const Var& a, std::size_t rank) {
    require(a.value().rank() == rank, op, "expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
}

// Elementwise unary op with derivative expressed through input x, output y and upstream g.
template <class Fwd, class Bwd>
Var unary(const char* op, const Var& a, Fwd fwd, Bwd bwd) {
    Tensor out(a.shape());
    const auto& x = a.value().vec();
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
    return make_result(op, std::move(out), {a}, [a, bwd](Node& self) {
        const auto& x = a.value().vec();
        const auto& y = self.value.vec();
        const auto& g = self.grad.vec();
        Tensor& ga = a.node()->grad_buffer();
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] += bwd(x[i], y[i], g[i]);
    });
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    require(b.shape()[0] == k, "matmul", shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out(Shape{m, n});
    const auto& A = a.value().vec();
    const auto& B = b.value().vec();
    for (std::size_t i = 0; i < m; ++i) {
        double* o = &out[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* br = &B[p * n];
            for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
        }
    }
    return make_result("matmul", std::move(out), {a, b}, [a, b, m, k, n](Node& self) {
        const auto& G = self.grad.vec();
        const auto& A = a.value().vec();
        const auto& B = b.value().vec();
        if (a.requires_grad()) {
            Tensor& ga = a.node()->grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
                    ga[i * k + p] += s;
                }
        }
        if (b.requires_grad()) {
            Tensor& gb = b.node()->grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = A[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * G[i * n + j];
                }
        }
    });
}

Var transpose(const Var& a) {
    require_rank("transpose", a, 2);
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out(Shape{n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.value()[i * n + j];
    return make_result("transpose", std::move(out), {a}, [a, m, n](Node& self) {
        Tensor& ga = a.node()->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
    });
}

Var reshape(const Var& a, Shape shape) {
    require(numel(shape) == a.size(), "reshape", shape_str(a.shape()) + " -> " + shape_str(shape));
    return make_result("reshape", a.value().reshaped(std::move(shape)), {a},
                       [a](Node& self) { a.node()->accumulate(self.grad.data()); });
}

Var add(const Var& a, const Var& b) {
    same_shape("add", a, b);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return make_result("add", std::move(out), {a, b}, [a, b](Node& self) {
        if (a.requires_grad()) a.node()->accumulate(self.grad.data());
        if (b.requires_grad()) b.node()->accumulate(self.grad.data());
    });
}

Var sub(const Var& a, const Var& b) {
    same_shape("sub", a, b);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    return make_result("sub", std::move(out), {a, b}, [a, b](Node& self) {
        if (a.requires_grad()) a.node()->accumulate(self.grad.data());
        if (b.requires_grad()) {
            Tensor& gb = b.node()->grad_buffer();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    same_shape("mul", a, b);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return make_result("mul", std::move(out), {a, b}, [a, b](Node& self) {
        if (a.requires_grad()) {
            Tensor& ga = a.node()->grad_buffer();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * b.value()[i];
        }
        if (b.requires_grad()) {
            Tensor& gb = b.node()->grad_buffer();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * a.value()[i];
        }
    });
}

Var div(const Var& a, const Var& b) {
    same_shape("div", a, b);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
    return make_result("div", std::move(out), {a, b}, [a, b](Node& self) {
        if (a.requires_grad()) {
            Tensor& ga = a.node()->grad_buffer();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] / b.value()[i];
        }
        if (b.requires_grad()) {
            Tensor& gb = b.node()->grad_buffer();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i] * self.value[i] / b.value()[i];
        }
    });
}

Var add_bias(const Var& a, const Var& bias) {
    require_rank("add_bias", a, 2);
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    require(bias.shape() == Shape{n}, "add_bias", shape_str(a.shape()) + " + " + shape_str(bias.shape()));
    Tensor out(a.shape());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.value()[i * n + j] + bias.value()[j];
    return make_result("add_bias", std::move(out), {a, bias}, [a, bias, m, n](Node& self) {
        if (a.requires_grad()) a.node()->accumulate(self.grad.data());
        if (bias.requires_grad()) {
            Tensor& gb = bias.node()->grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
        }
    });
}

Var affine(const Var& a, double scale, double shift) {
    return unary(
        "affine", a, [=](double x) { return scale * x + shift; },
        [=](double, double, double g) { return scale * g; });
}

Var scale_rows(const Var& a, const Var& w) {
    require_rank("scale_rows", a, 2);
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    require(w.shape() == Shape{m}, "scale_rows", shape_str(a.shape()) + " * " + shape_str(w.shape()));
    Tensor out(a.shape());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.value()[i * n + j] * w.value()[i];
    return make_result("scale_rows", std::move(out), {a, w}, [a, w, m, n](Node& self) {
        if (a.requires_grad()) {
            Tensor& ga = a.node()->grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[i * n + j] * w.value()[i];
        }
        if (w.requires_grad()) {
            Tensor& gw = w.node()->grad_buffer();
            for (std::size_t i = 0; i < m; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += self.grad[i * n + j] * a.value()[i * n + j];
                gw[i] += s;
            }
        }
    });
}

Var exp(const Var& a) {
    return unary(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y, double g) { return g * y; });
}

Var log(const Var& a) {
    return unary(
        "log", a, [](double x) { return std::log(x); }, [](double x, double, double g) { return g / x; });
}

Var sigmoid(const Var& a) {
    return unary(
        "sigmoid", a,
        [](double x) {
            if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y, double g) { return g * y * (1.0 - y); });
}

Var relu(const Var& a) {
    return unary(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
}

Var abs(const Var& a) {
    return unary(
        "abs", a, [](double x) { return std::abs(x); },
        [](double x, double, double g) { return x > 0.0 ? g : (x < 0.0 ? -g : 0.0); });
}

Var square(const Var& a) {
    return unary(
        "square", a, [](double x) { return x * x; }, [](double x, double, double g) { return 2.0 * x * g; });
}

Var clamp(const Var& a, double lo, double hi) {
    require(lo <= hi, "clamp", "lo > hi");
    return unary(
        "clamp", a, [=](double x) { return std::clamp(x, lo, hi); },
        [=](double x, double, double g) { return (x >= lo && x <= hi) ? g : 0.0; });
}

Var maximum(const Var& a, const Var& b) {
    same_shape("maximum", a, b);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.value()[i], b.value()[i]);
    return make_result("maximum", std::move(out), {a, b}, [a, b](Node& self) {
        for (std::size_t i = 0; i < self.value.size(); ++i) {
            const bool take_a = a.value()[i] >= b.value()[i];
            const Var& dst = take_a ? a : b;
            if (dst.requires_grad()) dst.node()->grad_buffer()[i] += self.grad[i];
        }
    });
}

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().vec()) s += v;
    return make_result("sum", Tensor::scalar(s), {a}, [a](Node& self) {
        Tensor& ga = a.node()->grad_buffer();
        const double g = self.grad[0];
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

Var mean(const Var& a) {
    require(a.size() > 0, "mean", "empty input");
    return affine(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var sum_axis(const Var& a, int axis) {
    require_rank("sum_axis", a, 2);
    require(axis == 0 || axis == 1, "sum_axis", "axis must be 0 or 1");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out(Shape{axis == 0 ? n : m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[axis == 0 ? j : i] += a.value()[i * n + j];
    return make_result("sum_axis", std::move(out), {a}, [a, axis, m, n](Node& self) {
        Tensor& ga = a.node()->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[axis == 0 ? j : i];
    });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
    require(!parts.empty(), "concat", "no inputs");
    const Shape& ref = parts.front().shape();
    require(axis < ref.size(), "concat", "axis out of range for " + shape_str(ref));
    std::size_t outer = 1, inner = 1, total = 0;
    for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
    for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == ref.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
        require(ok, "concat", shape_str(ref) + " vs " + shape_str(s));
        total += s[axis];
    }
    Shape out_shape = ref;
    out_shape[axis] = total;
    Tensor out(out_shape);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t len = p.shape()[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(&p.value()[o * len], len, &out[o * total * inner + off * inner]);
        off += p.shape()[axis];
    }
    return make_result("concat", std::move(out), parts, [parts, offsets, outer, inner, total, axis](Node& self) {
        for (std::size_t k = 0; k < parts.size(); ++k) {
            if (!parts[k].requires_grad()) continue;
            const std::size_t len = parts[k].shape()[axis] * inner;
            Tensor& g = parts[k].node()->grad_buffer();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t t = 0; t < len; ++t) g[o * len + t] += self.grad[o * total * inner + offsets[k] * inner + t];
        }
    });
}

Var slice_cols(const Var& a, std::size_t start, std::size_t count) {
    require_rank("slice_cols", a, 2);
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    require(start + count <= n, "slice_cols", shape_str(a.shape()) + " cols [" + std::to_string(start) + ", " +
                                                  std::to_string(start + count) + ")");
    Tensor out(Shape{m, count});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a.value()[i * n + start + j];
    return make_result("slice_cols", std::move(out), {a}, [a, m, n, start, count](Node& self) {
        Tensor& ga = a.node()->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < count; ++j) ga[i * n + start + j] += self.grad[i * count + j];
    });
}

Var gather_rows(const Var& a, std::span<const std::uint32_t> index) {
    require_rank("gather_rows", a, 2);
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<std::uint32_t> idx(index.begin(), index.end());
    Tensor out(Shape{idx.size(), n});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        require(idx[r] < m, "gather_rows", "row " + std::to_string(idx[r]) + " out of " + shape_str(a.shape()));
        std::copy_n(&a.value()[idx[r] * n], n, &out[r * n]);
    }
    return make_result("gather_rows", std::move(out), {a}, [a, idx = std::move(idx), n](Node& self) {
        Tensor& ga = a.node()->grad_buffer();
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < n; ++j) ga[idx[r] * n + j] += self.grad[r * n + j];
    });
}

Var scatter_rows(const Var& a, std::span<const std::uint32_t> index, std::size_t rows) {
    require_rank("scatter_rows", a, 2);
    const std::size_t k = a.shape()[0], n = a.shape()[1];
    require(index.size() == k, "scatter_rows", shape_str(a.shape()) + " with " + std::to_string(index.size()) + " indices");
    std::vector<std::uint32_t> idx(index.begin(), index.end());
    Tensor out(Shape{rows, n});
    for (std::size_t r = 0; r < k; ++r) {
        require(idx[r] < rows, "scatter_rows", "row " + std::to_string(idx[r]) + " out of " + std::to_string(rows));
        for (std::size_t j = 0; j < n; ++j) out[idx[r] * n + j] += a.value()[r * n + j];
    }
    return make_result("scatter_rows", std::move(out), {a}, [a, idx = std::move(idx), n](Node& self) {
        Tensor& ga = a.node()->grad_buffer();
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += self.grad[idx[r] * n + j];
    });
}

Var scatter_to_grid(const Var& tokens, std::span<const std::uint32_t> cells, std::size_t height, std::size_t width) {
    require_rank("scatter_to_grid", tokens, 2);
    const std::size_t n = tokens.shape()[0], c = tokens.shape()[1], hw = height * width;
    require(cells.size() == n, "scatter_to_grid", shape_str(tokens.shape()) + " with " + std::to_string(cells.size()) + " cells");
    std::vector<std::uint32_t> idx(cells.begin(), cells.end());
    Tensor out(Shape{c, height, width});
    for (std::size_t r = 0; r < n; ++r) {
        require(idx[r] < hw, "scatter_to_grid", "cell " + std::to_string(idx[r]) + " out of grid");
        for (std::size_t ch = 0; ch < c; ++ch) out[ch * hw + idx[r]] += tokens.value()[r * c + ch];
    }
    return make_result("scatter_to_grid", std::move(out), {tokens}, [tokens, idx = std::move(idx), c, hw](Node& self) {
        Tensor& g = tokens.node()->grad_buffer();
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t ch = 0; ch < c; ++ch) g[r * c + ch] += self.grad[ch * hw + idx[r]];
    });
}

Var gather_from_grid(const Var& grid, std::span<const std::uint32_t> cells) {
    require_rank("gather_from_grid", grid, 3);
    const std::size_t c = grid.shape()[0], hw = grid.shape()[1] * grid.shape()[2];
    std::vector<std::uint32_t> idx(cells.begin(), cells.end());
    Tensor out(Shape{idx.size(), c});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        require(idx[r] < hw, "gather_from_grid", "cell " + std::to_string(idx[r]) + " out of grid");
        for (std::size_t ch = 0; ch < c; ++ch) out[r * c + ch] = grid.value()[ch * hw + idx[r]];
    }
    return make_result("gather_from_grid", std::move(out), {grid}, [grid, idx = std::move(idx), c, hw](Node& self) {
        Tensor& g = grid.node()->grad_buffer();
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t ch = 0; ch < c; ++ch) g[ch * hw + idx[r]] += self.grad[r * c + ch];
    });
}

Var softmax_rows(const Var& a) {
    require_rank("softmax_rows", a, 2);
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out(a.shape());
    for (std::size_t i = 0; i < m; ++i) {
        const double* x = &a.value()[i * n];
        double mx = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(x[j] - mx));
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
    }
    return make_result("softmax_rows", std::move(out), {a}, [a, m, n](Node& self) {
        Tensor& ga = a.node()->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.value[i * n + j];
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.value[i * n + j] * (self.grad[i * n + j] - dot);
        }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    require_rank("layer_norm", x, 2);
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    require(gamma.shape() == Shape{n} && beta.shape() == Shape{n}, "layer_norm",
            shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
    Tensor out(x.shape());
    Tensor xhat(x.shape());
    std::vector<double> inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* r = &x.value()[i * n];
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += r[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (r[j] - mu) * (r[j] - mu);
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (r[j] - mu) * inv_std[i];
            out[i * n + j] = gamma.value()[j] * xhat[i * n + j] + beta.value()[j];
        }
    }
    return make_result("layer_norm", std::move(out), {x, gamma, beta},
                       [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), m, n](Node& self) {
                           const auto& g = self.grad;
                           if (gamma.requires_grad()) {
                               Tensor& gg = gamma.node()->grad_buffer();
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
                           }
                           if (beta.requires_grad()) {
                               Tensor& gb = beta.node()->grad_buffer();
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                           }
                           if (!x.requires_grad()) return;
                           Tensor& gx = x.node()->grad_buffer();
                           const double inv_n = 1.0 / static_cast<double>(n);
                           for (std::size_t i = 0; i < m; ++i) {
                               double mean_d = 0.0, mean_dx = 0.0;
                               for (std::size_t j = 0; j < n; ++j) {
                                   const double d = g[i * n + j] * gamma.value()[j];
                                   mean_d += d;
                                   mean_dx += d * xhat[i * n + j];
                               }
                               mean_d *= inv_n;
                               mean_dx *= inv_n;
                               for (std::size_t j = 0; j < n; ++j) {
                                   const double d = g[i * n + j] * gamma.value()[j];
                                   gx[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
                               }
                           }
                       });
}

namespace {

// Valid output range [lo, hi) along one axis for kernel tap `k` so that
// in = out*stride + k - 1 lies inside [0, in_len).
void tap_range(std::size_t in_len, std::size_t out_len, int stride, int k, std::size_t& lo, std::size_t& hi) {
    const long s = stride;
    long first = 0;
    while (first * s + k - 1 < 0) ++first;
    long last = static_cast<long>(out_len);
    while (last > first && (last - 1) * s + k - 1 >= static_cast<long>(in_len)) --last;
    lo = static_cast<std::size_t>(first);
    hi = static_cast<std::size_t>(std::max(first, last));
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride) {
    require_rank("conv2d", x, 3);
    require_rank("conv2d", w, 4);
    require(stride == 1 || stride == 2, "conv2d", "stride must be 1 or 2");
    const std::size_t cin = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
    const std::size_t cout = w.shape()[0];
    require(w.shape()[1] == cin && w.shape()[2] == 3 && w.shape()[3] == 3, "conv2d",
            "input " + shape_str(x.shape()) + " with kernel " + shape_str(w.shape()));
    require(b.shape() == Shape{cout}, "conv2d", "bias " + shape_str(b.shape()) + " for " + std::to_string(cout) + " outputs");
    const std::size_t ho = (h - 1) / stride + 1, wo = (wd - 1) / stride + 1;
    Tensor out(Shape{cout, ho, wo});
    const auto& X = x.value().vec();
    const auto& W = w.value().vec();

    struct Tap {
        std::size_t ylo, yhi, xlo, xhi;
    };
    std::array<Tap, 9> taps{};
    for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
            Tap& t = taps[ky * 3 + kx];
            tap_range(h, ho, stride, ky, t.ylo, t.yhi);
            tap_range(wd, wo, stride, kx, t.xlo, t.xhi);
        }

    for (std::size_t co = 0; co < cout; ++co) {
        double* o = &out[co * ho * wo];
        std::fill_n(o, ho * wo, b.value()[co]);
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* xin = &X[ci * h * wd];
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    const double wv = W[((co * cin + ci) * 3 + ky) * 3 + kx];
                    if (wv == 0.0) continue;
                    const Tap& t = taps[ky * 3 + kx];
                    const std::size_t len = t.xhi - t.xlo;
                    for (std::size_t oy = t.ylo; oy < t.yhi; ++oy) {
                        const double* in = xin + (oy * stride + ky - 1) * wd + (t.xlo * stride + kx - 1);
                        double* orow = o + oy * wo + t.xlo;
                        if (stride == 1) {
                            for (std::size_t j = 0; j < len; ++j) orow[j] += wv * in[j];
                        } else {
                            for (std::size_t j = 0; j < len; ++j) orow[j] += wv * in[2 * j];
                        }
                    }
                }
        }
    }
    return make_result("conv2d", std::move(out), {x, w, b}, [x, w, b, stride, cin, cout, h, wd, ho, wo, taps](Node& self) {
        const auto& G = self.grad.vec();
        const auto& X = x.value().vec();
        const auto& W = w.value().vec();
        if (b.requires_grad()) {
            Tensor& gb = b.node()->grad_buffer();
            for (std::size_t co = 0; co < cout; ++co) {
                double s = 0.0;
                for (std::size_t p = 0; p < ho * wo; ++p) s += G[co * ho * wo + p];
                gb[co] += s;
            }
        }
        Tensor* gw = w.requires_grad() ? &w.node()->grad_buffer() : nullptr;
        Tensor* gx = x.requires_grad() ? &x.node()->grad_buffer() : nullptr;
        for (std::size_t co = 0; co < cout; ++co) {
            const double* g = &G[co * ho * wo];
            for (std::size_t ci = 0; ci < cin; ++ci) {
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        const std::size_t widx = ((co * cin + ci) * 3 + ky) * 3 + kx;
                        const Tap& t = taps[ky * 3 + kx];
                        double acc = 0.0;
                        const double wv = W[widx];
                        const std::size_t len = t.xhi - t.xlo;
                        for (std::size_t oy = t.ylo; oy < t.yhi; ++oy) {
                            const std::size_t base = ci * h * wd + (oy * stride + ky - 1) * wd + (t.xlo * stride + kx - 1);
                            const double* grow = g + oy * wo + t.xlo;
                            const double* xrow = &X[base];
                            const std::size_t step = static_cast<std::size_t>(stride);
                            for (std::size_t j = 0; j < len; ++j) acc += grow[j] * xrow[j * step];
                            if (gx && wv != 0.0) {
                                double* dxrow = &(*gx)[base];
                                for (std::size_t j = 0; j < len; ++j) dxrow[j * step] += wv * grow[j];
                            }
                        }
                        if (gw) (*gw)[widx] += acc;
                    }
            }
        }
    });
}

Var upsample_nearest(const Var& x, std::size_t height, std::size_t width) {
    require_rank("upsample_nearest", x, 3);
    const std::size_t c = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
    require(h > 0 && wd > 0, "upsample_nearest", "empty input " + shape_str(x.shape()));
    std::vector<std::size_t> ys(height), xs(width);
    for (std::size_t y = 0; y < height; ++y) ys[y] = std::min(h - 1, y * h / height);
    for (std::size_t xx = 0; xx < width; ++xx) xs[xx] = std::min(wd - 1, xx * wd / width);
    Tensor out(Shape{c, height, width});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t xx = 0; xx < width; ++xx)
                out[(ch * height + y) * width + xx] = x.value()[(ch * h + ys[y]) * wd + xs[xx]];
    return make_result("upsample_nearest", std::move(out), {x}, [x, ys, xs, c, h, wd, height, width](Node& self) {
        Tensor& gx = x.node()->grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < height; ++y)
                for (std::size_t xx = 0; xx < width; ++xx)
                    gx[(ch * h + ys[y]) * wd + xs[xx]] += self.grad[(ch * height + y) * width + xx];
    });
}

double grad_check(const GraphBuilder& fn, const std::vector<Tensor>& inputs, double h) {
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(parameter(t));
    Var out = fn(vars);
    backward(out);
    std::vector<Tensor> analytic;
    for (const auto& v : vars) analytic.push_back(v.grad());

    auto eval = [&](std::size_t which, std::size_t idx, double delta) {
        std::vector<Var> probe;
        for (std::size_t k = 0; k < inputs.size(); ++k) {
            Tensor t = inputs[k];
            if (k == which) t[idx] += delta;
            probe.push_back(constant(std::move(t)));
        }
        return fn(probe).value().item();
    };

    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double fd = (eval(k, i, h) - eval(k, i, -h)) / (2.0 * h);
            const double err = std::abs(analytic[k][i] - fd) / std::max(std::abs(fd), 1e-8);
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace tokenhalt::ad
