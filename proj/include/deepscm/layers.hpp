#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "deepscm/rng.hpp"
#include "deepscm/tensor.hpp"

namespace deepscm {

using NamedTensor = std::pair<std::string, Tensor>;

/// Fully connected layer in row convention: y = x·W + b, W is [in×out].
struct Dense {
    Tensor w;
    Tensor b;

    Tensor operator()(const Tensor& x) const { return affine(x, w, b); }
    std::size_t in() const { return w.dim(0); }
    std::size_t out() const { return w.dim(1); }
};

/// Uniform(-1/sqrt(in), 1/sqrt(in)) weights and biases.
inline Dense make_dense(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(in * out), b(out);
    for (double& v : w) v = bound * (2.0 * uniform_open(rng) - 1.0);
    for (double& v : b) v = bound * (2.0 * uniform_open(rng) - 1.0);
    return {Tensor::from({in, out}, std::move(w), true), Tensor::from({out}, std::move(b), true)};
}

/// in -> hidden (PReLU) -> out.
struct Perceptron {
    Dense hidden;
    Tensor slope;
    Dense output;

    Tensor operator()(const Tensor& x) const { return output(prelu(hidden(x), slope)); }

    std::vector<NamedTensor> named(const std::string& prefix) const {
        return {{prefix + ".hidden.w", hidden.w}, {prefix + ".hidden.b", hidden.b},
                {prefix + ".slope", slope},       {prefix + ".output.w", output.w},
                {prefix + ".output.b", output.b}};
    }

    std::size_t in() const { return hidden.in(); }
    std::size_t out() const { return output.out(); }
};

inline Perceptron make_perceptron(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
    Perceptron p;
    p.hidden = make_dense(in, hidden, rng);
    p.slope = Tensor::full({1}, 0.25, true);
    p.output = make_dense(hidden, out, rng);
    return p;
}

/// Accepts a single vector [d] or a batch [B×d]; returns [B×d].
inline Tensor as_batch(const Tensor& x, std::size_t width, const char* op) {
    if (x.rank() == 1 && x.size() == width) {
        return reshape(x, {1, width});
    }
    if (x.rank() == 2 && x.dim(1) == width) {
        return x;
    }
    throw ShapeError(std::string(op) + ": expected width " + std::to_string(width) + ", got " +
                     shape_str(x.shape()));
}

} // namespace deepscm
