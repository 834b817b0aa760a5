#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "deepscm/error.hpp"

// Dense double-precision tensors with tape-free reverse-mode differentiation.
//
// Every op returns a new Tensor whose node keeps shared references to its
// parents and a closure that pushes the node's gradient into them. Calling
// backward() on a scalar walks the recorded DAG in reverse topological order.
// Leaf gradients accumulate across backward() calls until zero_grad().

namespace deepscm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool track_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) {
            grad.assign(data.size(), 0.0);
        }
        return grad;
    }
};

} // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> values, bool track_grad = false) {
        if (shape_size(shape) != values.size()) {
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
        }
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->data = std::move(values);
        node->track_grad = track_grad;
        return Tensor(std::move(node));
    }

    static Tensor zeros(Shape shape, bool track_grad = false) {
        const std::size_t n = shape_size(shape);
        return from(std::move(shape), std::vector<double>(n, 0.0), track_grad);
    }

    static Tensor full(Shape shape, double value, bool track_grad = false) {
        const std::size_t n = shape_size(shape);
        return from(std::move(shape), std::vector<double>(n, value), track_grad);
    }

    static Tensor scalar(double value, bool track_grad = false) {
        return from({1}, {value}, track_grad);
    }

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->data.size(); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

    /// Row count for a matrix view (leading dims flattened).
    std::size_t rows() const { return rank() <= 1 ? 1 : size() / node_->shape.back(); }
    /// Width of the innermost dimension.
    std::size_t cols() const { return node_->shape.empty() ? 1 : node_->shape.back(); }

    std::span<const double> data() const { return node_->data; }
    std::span<double> mutable_data() { return node_->data; }
    const std::vector<double>& values() const { return node_->data; }

    double operator[](std::size_t i) const { return node_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

    double item() const {
        if (size() != 1) {
            throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
        }
        return node_->data[0];
    }

    bool track_grad() const noexcept { return node_ && node_->track_grad; }
    bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }
    void set_track_grad(bool on) { node_->track_grad = on; }

    /// Same values, cut from the graph.
    Tensor detach() const { return from(shape(), node_->data, false); }

    /// Deep copy preserving the tracking flag (used for parameter snapshots).
    Tensor clone() const { return from(shape(), node_->data, node_->track_grad); }

    const detail::Node* node_ptr() const noexcept { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    std::shared_ptr<detail::Node> node_;

    friend Tensor make_op_result(Shape, std::vector<double>,
                                 std::initializer_list<const Tensor*>,
                                 std::function<void(detail::Node&)>);
    friend void backward(const Tensor& loss);
    friend detail::Node& node_of(const Tensor& t);
};

inline detail::Node& node_of(const Tensor& t) { return *t.node_; }

/// Builds an op output; records parents and the backward closure only when
/// some parent tracks gradients.
inline Tensor make_op_result(Shape shape, std::vector<double> values,
                             std::initializer_list<const Tensor*> parents,
                             std::function<void(detail::Node&)> backward_fn) {
    Tensor out = Tensor::from(std::move(shape), std::move(values), false);
    bool any = false;
    for (const Tensor* p : parents) {
        any = any || p->track_grad();
    }
    if (any) {
        out.node_->track_grad = true;
        for (const Tensor* p : parents) {
            out.node_->parents.push_back(p->node_);
        }
        out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
}

/// Gradient accumulator for parent i, or nullptr if it does not track.
inline std::vector<double>* parent_grad(detail::Node& self, std::size_t i) {
    detail::Node& p = *self.parents[i];
    return p.track_grad ? &p.grad_buffer() : nullptr;
}

inline const std::vector<double>& parent_data(detail::Node& self, std::size_t i) {
    return self.parents[i]->data;
}

inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward: loss must be a scalar tensor");
    }
    if (!loss.track_grad()) {
        return;
    }
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node_.get(), 0);
    seen.insert(loss.node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->track_grad && !seen.count(parent)) {
                seen.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // Interior nodes start from zero on every call; leaves accumulate.
    for (detail::Node* node : order) {
        if (node->backward_fn) {
            node->grad.assign(node->data.size(), 0.0);
        }
    }
    loss.node_->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->backward_fn) {
            node->backward_fn(*node);
        }
    }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

inline void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

/// out[m×q] = x[m×p] · W[p×q] (+ b[q] when given).
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor* b) {
    require_matrix(x, "affine");
    require_matrix(w, "affine");
    const std::size_t m = x.dim(0), p = x.dim(1), q = w.dim(1);
    if (w.dim(0) != p) {
        throw ShapeError("affine: inner dimensions disagree " + shape_str(x.shape()) + " · " +
                         shape_str(w.shape()));
    }
    if (b && b->size() != q) {
        throw ShapeError("affine: bias " + shape_str(b->shape()) + " for output width " +
                         std::to_string(q));
    }
    std::vector<double> out(m * q, 0.0);
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * q;
        if (b) {
            std::copy(b->data().begin(), b->data().end(), row);
        }
        for (std::size_t k = 0; k < p; ++k) {
            const double xik = xd[i * p + k];
            if (xik == 0.0) continue;
            const double* wrow = wd + k * q;
            for (std::size_t j = 0; j < q; ++j) {
                row[j] += xik * wrow[j];
            }
        }
    }
    auto fn = [m, p, q, has_bias = b != nullptr](detail::Node& self) {
        const double* g = self.grad.data();
        const auto& xd = parent_data(self, 0);
        const auto& wd = parent_data(self, 1);
        if (auto* gx = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < m; ++i) {
                const double* grow = g + i * q;
                for (std::size_t k = 0; k < p; ++k) {
                    const double* wrow = wd.data() + k * q;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < q; ++j) acc += grow[j] * wrow[j];
                    (*gx)[i * p + k] += acc;
                }
            }
        }
        if (auto* gw = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < m; ++i) {
                const double* grow = g + i * q;
                for (std::size_t k = 0; k < p; ++k) {
                    const double xik = xd[i * p + k];
                    if (xik == 0.0) continue;
                    double* gwrow = gw->data() + k * q;
                    for (std::size_t j = 0; j < q; ++j) gwrow[j] += xik * grow[j];
                }
            }
        }
        if (has_bias) {
            if (auto* gb = parent_grad(self, 2)) {
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < q; ++j) (*gb)[j] += g[i * q + j];
                }
            }
        }
    };
    if (b) {
        return make_op_result({m, q}, std::move(out), {&x, &w, b}, fn);
    }
    return make_op_result({m, q}, std::move(out), {&x, &w}, fn);
}

inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    return affine(x, w, &b);
}

inline Tensor matmul(const Tensor& x, const Tensor& w) { return affine(x, w, nullptr); }

template <typename Fwd, typename Bwd>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, Bwd bwd) {
    require_same_shape(a, b, op);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a[i], b[i]);
    return make_op_result(a.shape(), std::move(out), {&a, &b}, [bwd](detail::Node& self) {
        const auto& ad = parent_data(self, 0);
        const auto& bd = parent_data(self, 1);
        auto* ga = parent_grad(self, 0);
        auto* gb = parent_grad(self, 1);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const auto [da, db] = bwd(ad[i], bd[i]);
            if (ga) (*ga)[i] += self.grad[i] * da;
            if (gb) (*gb)[i] += self.grad[i] * db;
        }
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double) { return std::pair{1.0, 1.0}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double) { return std::pair{1.0, -1.0}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double x, double y) { return std::pair{y, x}; });
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.values());
    for (double& v : out) v *= c;
    return make_op_result(x.shape(), std::move(out), {&x}, [c](detail::Node& self) {
        if (auto* gx = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += c * self.grad[i];
        }
    });
}

/// Same data under a new shape of equal size.
inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_size(shape) != x.size()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    return make_op_result(std::move(shape), x.values(), {&x}, [](detail::Node& self) {
        if (auto* gx = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
        }
    });
}

inline Tensor sum(const Tensor& x) {
    const double s = std::accumulate(x.data().begin(), x.data().end(), 0.0);
    return make_op_result({1}, {s}, {&x}, [](detail::Node& self) {
        if (auto* gx = parent_grad(self, 0)) {
            for (double& g : *gx) g += self.grad[0];
        }
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Elementwise PReLU; slope is a single value or one per column.
inline Tensor prelu(const Tensor& x, const Tensor& slope) {
    const std::size_t c = x.cols();
    if (slope.size() != 1 && slope.size() != c) {
        throw ShapeError("prelu: slope " + shape_str(slope.shape()) + " for width " +
                         std::to_string(c));
    }
    const bool shared = slope.size() == 1;
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double a = slope[shared ? 0 : i % c];
        out[i] = x[i] >= 0.0 ? x[i] : a * x[i];
    }
    return make_op_result(x.shape(), std::move(out), {&x, &slope},
                          [shared, c](detail::Node& self) {
        const auto& xd = parent_data(self, 0);
        const auto& sd = parent_data(self, 1);
        auto* gx = parent_grad(self, 0);
        auto* gs = parent_grad(self, 1);
        for (std::size_t i = 0; i < xd.size(); ++i) {
            const std::size_t si = shared ? 0 : i % c;
            if (xd[i] >= 0.0) {
                if (gx) (*gx)[i] += self.grad[i];
            } else {
                if (gx) (*gx)[i] += self.grad[i] * sd[si];
                if (gs) (*gs)[si] += self.grad[i] * xd[i];
            }
        }
    });
}

inline Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x[i];
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    return make_op_result(x.shape(), std::move(out), {&x}, [](detail::Node& self) {
        if (auto* gx = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double s = self.data[i];
                (*gx)[i] += self.grad[i] * s * (1.0 - s);
            }
        }
    });
}

namespace detail {

inline void softmax_row(const double* in, double* out, std::size_t k) {
    const double mx = *std::max_element(in, in + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        out[j] = std::exp(in[j] - mx);
        z += out[j];
    }
    for (std::size_t j = 0; j < k; ++j) out[j] /= z;
}

} // namespace detail

/// Softmax over the innermost dimension, max-subtracted.
inline Tensor softmax_rows(const Tensor& x) {
    const std::size_t k = x.cols(), m = x.rows();
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < m; ++r) detail::softmax_row(x.data().data() + r * k, &out[r * k], k);
    return make_op_result(x.shape(), std::move(out), {&x}, [k, m](detail::Node& self) {
        if (auto* gx = parent_grad(self, 0)) {
            for (std::size_t r = 0; r < m; ++r) {
                const double* y = &self.data[r * k];
                const double* g = &self.grad[r * k];
                double dot = 0.0;
                for (std::size_t j = 0; j < k; ++j) dot += y[j] * g[j];
                for (std::size_t j = 0; j < k; ++j) (*gx)[r * k + j] += y[j] * (g[j] - dot);
            }
        }
    });
}

inline Tensor log_softmax_rows(const Tensor& x) {
    const std::size_t k = x.cols(), m = x.rows();
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < m; ++r) {
        const double* in = x.data().data() + r * k;
        const double mx = *std::max_element(in, in + k);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(in[j] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < k; ++j) out[r * k + j] = in[j] - lse;
    }
    return make_op_result(x.shape(), std::move(out), {&x}, [k, m](detail::Node& self) {
        if (auto* gx = parent_grad(self, 0)) {
            for (std::size_t r = 0; r < m; ++r) {
                const double* ly = &self.data[r * k];
                const double* g = &self.grad[r * k];
                const double gs = std::accumulate(g, g + k, 0.0);
                for (std::size_t j = 0; j < k; ++j) {
                    (*gx)[r * k + j] += g[j] - std::exp(ly[j]) * gs;
                }
            }
        }
    });
}

/// Batch-mean cross entropy of integer labels under row softmax of logits.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    require_matrix(logits, "cross_entropy");
    const std::size_t m = logits.dim(0), k = logits.dim(1);
    if (labels.size() != m) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(m) + " rows");
    }
    std::vector<double> probs(logits.size());
    double loss = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
        const int y = labels[r];
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0," +
                             std::to_string(k) + ")");
        }
        const double* in = logits.data().data() + r * k;
        const double mx = *std::max_element(in, in + k);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(in[j] - mx);
        loss += mx + std::log(z) - in[y];
        for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(in[j] - mx) / z;
    }
    loss /= static_cast<double>(m);
    std::vector<int> ys(labels.begin(), labels.end());
    return make_op_result({1}, {loss}, {&logits},
                          [probs = std::move(probs), ys = std::move(ys), m, k](detail::Node& self) {
        if (auto* gx = parent_grad(self, 0)) {
            const double c = self.grad[0] / static_cast<double>(m);
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t j = 0; j < k; ++j) {
                    const double onehot = static_cast<int>(j) == ys[r] ? 1.0 : 0.0;
                    (*gx)[r * k + j] += c * (probs[r * k + j] - onehot);
                }
            }
        }
    });
}

inline Tensor mse(const Tensor& x, const Tensor& y) {
    require_same_shape(x, y, "mse");
    const std::size_t n = x.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
    return make_op_result({1}, {acc / static_cast<double>(n)}, {&x, &y}, [n](detail::Node& self) {
        const auto& xd = parent_data(self, 0);
        const auto& yd = parent_data(self, 1);
        auto* gx = parent_grad(self, 0);
        auto* gy = parent_grad(self, 1);
        const double c = 2.0 * self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = c * (xd[i] - yd[i]);
            if (gx) (*gx)[i] += d;
            if (gy) (*gy)[i] -= d;
        }
    });
}

inline Tensor sum_sq(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v * v;
    return make_op_result({1}, {acc}, {&x}, [](detail::Node& self) {
        if (auto* gx = parent_grad(self, 0)) {
            const auto& xd = parent_data(self, 0);
            for (std::size_t i = 0; i < xd.size(); ++i) (*gx)[i] += 2.0 * xd[i] * self.grad[0];
        }
    });
}

/// Forward: one-hot of each row's argmax. Backward: identity, so gradients
/// flow through the relaxed input (straight-through estimator).
inline Tensor straight_through_onehot(const Tensor& soft) {
    const std::size_t k = soft.cols(), m = soft.rows();
    std::vector<double> out(soft.size(), 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        const double* row = soft.data().data() + r * k;
        out[r * k + static_cast<std::size_t>(std::max_element(row, row + k) - row)] = 1.0;
    }
    return make_op_result(soft.shape(), std::move(out), {&soft}, [](detail::Node& self) {
        if (auto* gx = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
        }
    });
}

/// Scales each row r so that sum(row²) / (cols/2) == power, i.e. a row of
/// interleaved I/Q reals meets average complex-symbol power `power`.
inline Tensor normalize_power_rows(const Tensor& x, double power) {
    require_matrix(x, "normalize_power_rows");
    const std::size_t m = x.dim(0), c = x.dim(1);
    const double symbols = static_cast<double>(c) / 2.0;
    std::vector<double> out(x.size());
    std::vector<double> gains(m), energies(m);
    for (std::size_t r = 0; r < m; ++r) {
        double e = 0.0;
        for (std::size_t j = 0; j < c; ++j) e += x.at(r, j) * x.at(r, j);
        if (!(e > 0.0)) {
            throw DegeneratePowerError("normalize_power: sequence " + std::to_string(r) +
                                       " has zero energy");
        }
        energies[r] = e;
        gains[r] = std::sqrt(symbols * power / e);
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] = gains[r] * x.at(r, j);
    }
    return make_op_result({m, c}, std::move(out), {&x},
                          [m, c, gains = std::move(gains), energies = std::move(energies)](
                              detail::Node& self) {
        if (auto* gx = parent_grad(self, 0)) {
            const auto& xd = parent_data(self, 0);
            for (std::size_t r = 0; r < m; ++r) {
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += self.grad[r * c + j] * xd[r * c + j];
                for (std::size_t j = 0; j < c; ++j) {
                    (*gx)[r * c + j] +=
                        gains[r] * (self.grad[r * c + j] - xd[r * c + j] * dot / energies[r]);
                }
            }
        }
    });
}

/// Per-column standardization with batch statistics (population variance).
inline Tensor standardize_cols(const Tensor& x, double eps = 1e-8) {
    require_matrix(x, "standardize_cols");
    const std::size_t m = x.dim(0), c = x.dim(1);
    if (m < 2) {
        throw InsufficientSamplesError("standardize_cols: need at least two rows");
    }
    std::vector<double> mu(c, 0.0), inv_sd(c, 0.0), out(x.size());
    for (std::size_t j = 0; j < c; ++j) {
        double s = 0.0;
        for (std::size_t r = 0; r < m; ++r) s += x.at(r, j);
        mu[j] = s / static_cast<double>(m);
        double v = 0.0;
        for (std::size_t r = 0; r < m; ++r) v += (x.at(r, j) - mu[j]) * (x.at(r, j) - mu[j]);
        inv_sd[j] = 1.0 / std::sqrt(v / static_cast<double>(m) + eps);
        for (std::size_t r = 0; r < m; ++r) out[r * c + j] = (x.at(r, j) - mu[j]) * inv_sd[j];
    }
    return make_op_result({m, c}, std::move(out), {&x},
                          [m, c, inv_sd = std::move(inv_sd)](detail::Node& self) {
        if (auto* gx = parent_grad(self, 0)) {
            const double dm = static_cast<double>(m);
            for (std::size_t j = 0; j < c; ++j) {
                double gsum = 0.0, gy = 0.0;
                for (std::size_t r = 0; r < m; ++r) {
                    gsum += self.grad[r * c + j];
                    gy += self.grad[r * c + j] * self.data[r * c + j];
                }
                for (std::size_t r = 0; r < m; ++r) {
                    (*gx)[r * c + j] += inv_sd[j] / dm *
                                        (dm * self.grad[r * c + j] - gsum - self.data[r * c + j] * gy);
                }
            }
        }
    });
}

/// (x - shift[col]) * gain[col] with constant per-column shift and gain.
inline Tensor column_affine(const Tensor& x, std::span<const double> shift,
                            std::span<const double> gain) {
    const std::size_t c = x.cols();
    if (shift.size() != c || gain.size() != c) {
        throw ShapeError("column_affine: per-column constants do not match width");
    }
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x[i] - shift[i % c]) * gain[i % c];
    std::vector<double> g(gain.begin(), gain.end());
    return make_op_result(x.shape(), std::move(out), {&x}, [c, g = std::move(g)](detail::Node& self) {
        if (auto* gx = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i] * g[i % c];
        }
    });
}

} // namespace deepscm
