#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "deepscm/error.hpp"
#include "deepscm/layers.hpp"
#include "deepscm/tensor.hpp"

namespace deepscm {

/// k -> h -> 2n feature extractor (basic encoder θ1 or enhancement encoder θ2).
using EncoderParams = Perceptron;
/// 2n -> h -> L class logits (ψ1 / ψ2).
using ClassifierParams = Perceptron;
/// 2n -> h -> k, followed by a sigmoid (η1 / η2).
using ReconstructorParams = Perceptron;

struct LossWeights {
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    double lambda3 = 0.1;
    double beta = 1.0;
};

inline void validate(const LossWeights& w) {
    if (w.lambda1 < 0.0 || w.lambda2 < 0.0 || w.lambda3 < 0.0 || w.beta < 0.0) {
        throw ContractError("loss weights must be non-negative");
    }
}

inline Tensor encode_basic(const Tensor& x, const EncoderParams& theta1) {
    return theta1(as_batch(x, theta1.in(), "encode_basic"));
}

inline Tensor encode_enhanced(const Tensor& x, const EncoderParams& theta2) {
    return theta2(as_batch(x, theta2.in(), "encode_enhanced"));
}

/// z is the received sequence as 2n interleaved reals (I0, Q0, I1, Q1, ...).
inline Tensor decode_class(const Tensor& z, const ClassifierParams& psi) {
    return psi(as_batch(z, psi.in(), "decode_class"));
}

inline Tensor decode_recon(const Tensor& z, const ReconstructorParams& eta) {
    return sigmoid(eta(as_batch(z, eta.in(), "decode_recon")));
}

/// CE(S1, Ŝ1) + λ1·MSE(X, X̂1).
inline Tensor loss_stage1(const Tensor& s1_logits, std::span<const int> s1, const Tensor& x_hat,
                          const Tensor& x, const LossWeights& w) {
    return add(cross_entropy(s1_logits, s1), scale(mse(x_hat, x), w.lambda1));
}

/// CE(S2, Ŝ2) + λ2·MSE(X, X̂2) + λ3·(batch mean of ||R||²).
inline Tensor loss_stage2(const Tensor& s2_logits, std::span<const int> s2, const Tensor& x_hat2,
                          const Tensor& x, const Tensor& r, const LossWeights& w) {
    const double rows = static_cast<double>(r.rows());
    return add(add(cross_entropy(s2_logits, s2), scale(mse(x_hat2, x), w.lambda2)),
               scale(sum_sq(r), w.lambda3 / rows));
}

inline Tensor loss_stage3(const Tensor& l1, const Tensor& l2, double beta) {
    return add(l1, scale(l2, beta));
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   DEEPSCM-CHECKPOINT 1
//   <count>
//   <name> <d0>x<d1>...      (one line per tensor, in payload order)
//   end
//   <little-endian IEEE-754 binary64 payload>
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open " + path + " for writing");
    }
    out << "DEEPSCM-CHECKPOINT 1\n" << tensors.size() << '\n';
    for (const auto& [name, t] : tensors) {
        out << name << ' ';
        for (std::size_t i = 0; i < t.rank(); ++i) out << (i ? "x" : "") << t.dim(i);
        out << '\n';
    }
    out << "end\n";
    for (const auto& [name, t] : tensors) {
        for (double v : t.data()) {
            auto bits = std::bit_cast<std::uint64_t>(v);
            unsigned char bytes[8];
            for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>(bits >> (8 * b));
            out.write(reinterpret_cast<const char*>(bytes), 8);
        }
    }
    if (!out) {
        throw IoError("write failed: " + path);
    }
}

/// Reads a checkpoint into `tensors` by name; names and shapes must match.
inline void load_checkpoint(const std::string& path, std::vector<NamedTensor>& tensors) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    std::string line;
    if (!std::getline(in, line) || line != "DEEPSCM-CHECKPOINT 1") {
        throw IoError(path + ": not a checkpoint");
    }
    std::size_t count = 0;
    if (!std::getline(in, line)) throw IoError(path + ": truncated header");
    try {
        count = std::stoul(line);
    } catch (const std::exception&) {
        throw IoError(path + ": bad tensor count");
    }
    std::vector<std::pair<std::string, std::string>> header;
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(in, line)) throw IoError(path + ": truncated header");
        const auto sp = line.find(' ');
        if (sp == std::string::npos) throw IoError(path + ": bad header line '" + line + "'");
        header.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    if (!std::getline(in, line) || line != "end") {
        throw IoError(path + ": missing header terminator");
    }
    std::map<std::string, Tensor*> by_name;
    for (auto& [name, t] : tensors) by_name[name] = &t;
    if (header.size() != tensors.size()) {
        throw IoError(path + ": holds " + std::to_string(header.size()) + " tensors, model has " +
                      std::to_string(tensors.size()));
    }
    for (const auto& [name, dims] : header) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError(path + ": unknown tensor " + name);
        Tensor& t = *it->second;
        std::ostringstream expect;
        for (std::size_t i = 0; i < t.rank(); ++i) expect << (i ? "x" : "") << t.dim(i);
        if (expect.str() != dims) {
            throw IoError(path + ": tensor " + name + " has shape " + dims + ", model expects " +
                          expect.str());
        }
        for (double& v : t.mutable_data()) {
            unsigned char bytes[8];
            if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw IoError(path + ": truncated payload");
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
            v = std::bit_cast<double>(bits);
        }
    }
}

} // namespace deepscm
