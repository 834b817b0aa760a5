#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "deepscm/channel.hpp"
#include "deepscm/config.hpp"
#include "deepscm/constellation.hpp"
#include "deepscm/csv.hpp"
#include "deepscm/decorrelator.hpp"
#include "deepscm/hier_data.hpp"
#include "deepscm/layers.hpp"
#include "deepscm/models.hpp"
#include "deepscm/modulator.hpp"
#include "deepscm/optim.hpp"
#include "deepscm/rng.hpp"
#include "deepscm/tensor.hpp"

// Transmit/receive chains for DeepSCM and the unstructured CM baselines,
// the staged training procedures, Monte Carlo evaluation and sweeps.

namespace deepscm {

// ---------------------------------------------------------------------------
// Scalar metrics
// ---------------------------------------------------------------------------

struct Rational {
    std::int64_t num = 0;
    std::int64_t den = 1;

    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    friend bool operator==(const Rational&, const Rational&) = default;
};

/// Channel uses per source dimension, r = n/k, in lowest terms.
inline Rational rate(std::int64_t n, std::int64_t k) {
    if (k <= 0) {
        throw ContractError("rate: k must be positive");
    }
    const std::int64_t g = std::gcd(n, k);
    return {n / g, k / g};
}

inline constexpr double kPsnrCap = 99.0;

/// 10·log10(max²/MSE); perfect reconstruction reports the 99 dB cap.
inline double psnr(std::span<const double> x, std::span<const double> x_hat, double max_val = 1.0) {
    if (x.size() != x_hat.size()) {
        throw ShapeError("psnr: length mismatch");
    }
    if (!(max_val > 0.0)) {
        throw ContractError("psnr: max value must be positive");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - x_hat[i]) * (x[i] - x_hat[i]);
    const double m = acc / static_cast<double>(x.size());
    if (m == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(max_val * max_val / m));
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

using ParamGroups = std::map<std::string, std::vector<NamedTensor>>;

inline std::vector<Tensor> tensors_of(const ParamGroups& groups, std::initializer_list<std::string_view> names) {
    std::vector<Tensor> out;
    for (std::string_view name : names) {
        for (const auto& [_, t] : groups.at(std::string(name))) out.push_back(t);
    }
    return out;
}

inline std::vector<Tensor> all_tensors(const ParamGroups& groups) {
    std::vector<Tensor> out;
    for (const auto& [_, g] : groups) {
        for (const auto& [__, t] : g) out.push_back(t);
    }
    return out;
}

/// Deep copy of every group's values, for freeze audits.
inline std::map<std::string, std::vector<std::vector<double>>> snapshot(const ParamGroups& groups) {
    std::map<std::string, std::vector<std::vector<double>>> out;
    for (const auto& [name, g] : groups) {
        for (const auto& [_, t] : g) out[name].push_back(t.values());
    }
    return out;
}

struct DeepScmModel {
    EncoderParams theta1, theta2;
    ModulatorParams alpha1, alpha2;
    Dense decorrelator;
    ClassifierParams psi1, psi2;
    ReconstructorParams eta1, eta2;
    // Evaluation-time standardization of R, fitted on training data.
    Tensor r_shift, r_gain;

    ParamGroups groups() const {
        ParamGroups g;
        g["theta1"] = theta1.named("theta1");
        g["theta2"] = theta2.named("theta2");
        g["alpha1"] = alpha1.net.named("alpha1");
        g["alpha2"] = alpha2.net.named("alpha2");
        g["decorrelator"] = {{"decorrelator.w", decorrelator.w}, {"decorrelator.b", decorrelator.b}};
        g["psi1"] = psi1.named("psi1");
        g["psi2"] = psi2.named("psi2");
        g["eta1"] = eta1.named("eta1");
        g["eta2"] = eta2.named("eta2");
        return g;
    }

    /// Everything a checkpoint stores, trainable or not.
    std::vector<NamedTensor> named() const {
        std::vector<NamedTensor> out;
        for (const auto& [_, g] : groups()) out.insert(out.end(), g.begin(), g.end());
        out.emplace_back("r_norm.shift", r_shift);
        out.emplace_back("r_norm.gain", r_gain);
        return out;
    }
};

inline const std::vector<std::string>& stage1_groups() {
    static const std::vector<std::string> g = {"theta1", "alpha1", "psi1", "eta1"};
    return g;
}

inline const std::vector<std::string>& stage2_groups() {
    static const std::vector<std::string> g = {"theta2", "alpha2", "decorrelator", "psi2", "eta2"};
    return g;
}

inline DeepScmModel make_deepscm(const RunConfig& cfg, Rng& rng) {
    const std::size_t k = cfg.data.k, d = 2 * cfg.n, h = cfg.hidden;
    DeepScmModel m;
    m.theta1 = make_perceptron(k, h, d, rng);
    m.theta2 = make_perceptron(k, h, d, rng);
    m.alpha1 = make_modulator(cfg.n, cfg.m1, h, rng);
    m.alpha2 = make_modulator(cfg.n, cfg.m2, h, rng);
    m.decorrelator = {Tensor::zeros({d, d}, true), Tensor::zeros({d}, true)};
    m.psi1 = make_perceptron(d, h, cfg.data.L1, rng);
    m.psi2 = make_perceptron(d, h, cfg.data.L2, rng);
    m.eta1 = make_perceptron(d, h, k, rng);
    m.eta2 = make_perceptron(d, h, k, rng);
    m.r_shift = Tensor::zeros({d});
    m.r_gain = Tensor::full({d}, 1.0);
    return m;
}

/// Single encoder and modulator over rectangular (M1·M2)-QAM.
struct CmModel {
    EncoderParams theta;
    ModulatorParams alpha;
    ClassifierParams psi1, psi2;
    ReconstructorParams eta1, eta2;

    ParamGroups groups() const {
        ParamGroups g;
        g["theta"] = theta.named("theta");
        g["alpha"] = alpha.net.named("alpha");
        g["psi1"] = psi1.named("psi1");
        g["psi2"] = psi2.named("psi2");
        g["eta1"] = eta1.named("eta1");
        g["eta2"] = eta2.named("eta2");
        return g;
    }

    std::vector<NamedTensor> named() const {
        std::vector<NamedTensor> out;
        for (const auto& [_, g] : groups()) out.insert(out.end(), g.begin(), g.end());
        return out;
    }
};

inline CmModel make_cm(const RunConfig& cfg, Rng& rng) {
    const std::size_t k = cfg.data.k, d = 2 * cfg.n, h = cfg.hidden;
    CmModel m;
    m.theta = make_perceptron(k, h, d, rng);
    m.alpha = make_modulator(cfg.n, cfg.m1 * cfg.m2, h, rng);
    m.psi1 = make_perceptron(d, h, cfg.data.L1, rng);
    m.psi2 = make_perceptron(d, h, cfg.data.L2, rng);
    m.eta1 = make_perceptron(d, h, k, rng);
    m.eta2 = make_perceptron(d, h, k, rng);
    return m;
}

/// Restricts gradient recording to `active` for the guard's lifetime and
/// restores every tracking flag in `all` afterwards. Scopes nest.
class GradScope {
public:
    GradScope(std::vector<Tensor> all, const std::vector<Tensor>& active) : all_(std::move(all)) {
        for (Tensor& t : all_) {
            saved_.push_back(t.track_grad());
            t.set_track_grad(false);
        }
        for (Tensor t : active) t.set_track_grad(true);
    }
    GradScope(const GradScope&) = delete;
    GradScope& operator=(const GradScope&) = delete;
    ~GradScope() {
        for (std::size_t i = 0; i < all_.size(); ++i) all_[i].set_track_grad(saved_[i]);
    }

private:
    std::vector<Tensor> all_;
    std::vector<bool> saved_;
};

// ---------------------------------------------------------------------------
// Forward chains
// ---------------------------------------------------------------------------

enum class Phase { Stage1, Stage2, Stage3, Eval };

struct NoiseLevels {
    double sigma2_1 = 0.0;
    double sigma2_2 = 0.0;
};

inline NoiseLevels noise_levels(const RunConfig& cfg) {
    return {cfg.channel().sigma2_1(), cfg.channel().sigma2_2()};
}

struct Modulated {
    SymbolDistribution dist;
    Tensor onehots;
    Tensor y;
};

inline Modulated modulate(const Tensor& u, const ModulatorParams& alpha, const Constellation& c,
                          const RunConfig& cfg, bool eval, Rng& rng) {
    Modulated out;
    out.dist = symbol_logits(u, alpha);
    const GumbelConfig gcfg{cfg.temperature, eval || cfg.train_hard};
    out.onehots = gumbel_softmax_sample(out.dist, gcfg, rng);
    const Tensor raw = map_to_symbols(out.onehots, c, out.dist.batch);
    out.y = cfg.power_norm == PowerNorm::Sequence
                ? normalize_power(raw, cfg.power)
                : normalize_expected_power(raw, out.dist, c, cfg.power);
    return out;
}

struct ForwardResult {
    Tensor u1, u2, r;
    Tensor y1, y2, y;
    Tensor s1_logits, x_hat1, s2_logits, x_hat2;
    Tensor onehots1, onehots2;
};

/// X -> (U1, U2) -> R -> (Y1, Y2) -> Y = √a Y1 + √(1-a) Y2 -> (Z1, Z2) -> decoders.
/// Stage 1 sends the inner layer alone and only runs Receiver 1; stage 2
/// skips Receiver 1, whose parameters are frozen.
inline ForwardResult forward_deepscm(const DeepScmModel& m, const Tensor& x, const RunConfig& cfg,
                                     Phase phase, const NoiseLevels& noise, Rng& rng) {
    validate_degraded(cfg.channel());
    const Constellation c1 = make_square_qam(cfg.m1);
    const Constellation c2 = make_square_qam(cfg.m2);
    const bool eval = phase == Phase::Eval;
    const double ga = std::sqrt(cfg.paf), gb = std::sqrt(1.0 - cfg.paf);

    ForwardResult f;
    f.u1 = encode_basic(x, m.theta1);
    if (phase == Phase::Stage2) f.u1 = f.u1.detach();
    Modulated mod1 = modulate(f.u1, m.alpha1, c1, cfg, eval, rng);
    f.y1 = mod1.y;
    f.onehots1 = mod1.onehots;

    if (phase == Phase::Stage1) {
        f.y = cfg.stage1_power == Stage1Power::InnerOnly ? scale(f.y1, ga) : f.y1;
        const Tensor z1 = awgn(f.y, noise.sigma2_1, rng);
        f.s1_logits = decode_class(z1, m.psi1);
        f.x_hat1 = decode_recon(z1, m.eta1);
        return f;
    }

    f.u2 = encode_enhanced(x, m.theta2);
    f.r = residual(f.u1, f.u2, m.decorrelator);
    const Tensor r_in = eval ? column_affine(f.r, m.r_shift.data(), m.r_gain.data())
                             : standardize_cols(f.r);
    Modulated mod2 = modulate(r_in, m.alpha2, c2, cfg, eval, rng);
    f.y2 = mod2.y;
    f.onehots2 = mod2.onehots;
    f.y = add(scale(f.y1, ga), scale(f.y2, gb));

    const Tensor z1 = awgn(f.y, noise.sigma2_1, rng);
    const Tensor z2 = awgn(f.y, noise.sigma2_2, rng);
    if (phase != Phase::Stage2) {
        f.s1_logits = decode_class(z1, m.psi1);
        f.x_hat1 = decode_recon(z1, m.eta1);
    }
    f.s2_logits = decode_class(z2, m.psi2);
    f.x_hat2 = decode_recon(z2, m.eta2);
    return f;
}

inline ForwardResult forward_cm(const CmModel& m, const Tensor& x, const RunConfig& cfg, bool eval,
                                const NoiseLevels& noise, Rng& rng) {
    const Constellation c = make_square_qam(cfg.m1 * cfg.m2);
    ForwardResult f;
    f.u1 = encode_basic(x, m.theta);
    Modulated mod = modulate(f.u1, m.alpha, c, cfg, eval, rng);
    f.y1 = mod.y;
    f.y = mod.y;
    f.onehots1 = mod.onehots;
    const Tensor z1 = awgn(f.y, noise.sigma2_1, rng);
    const Tensor z2 = awgn(f.y, noise.sigma2_2, rng);
    f.s1_logits = decode_class(z1, m.psi1);
    f.x_hat1 = decode_recon(z1, m.eta1);
    f.s2_logits = decode_class(z2, m.psi2);
    f.x_hat2 = decode_recon(z2, m.eta2);
    return f;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochRecord {
    std::string phase;
    std::size_t epoch = 0;
    double loss = 0.0;
    double acc1 = std::numeric_limits<double>::quiet_NaN();
    double acc2 = std::numeric_limits<double>::quiet_NaN();
    double r_norm_sq = std::numeric_limits<double>::quiet_NaN();
    double crosscov_max = std::numeric_limits<double>::quiet_NaN();
    double entropy_bound = std::numeric_limits<double>::quiet_NaN();
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    /// Groups that received a nonzero gradient during the first epoch of
    /// the most recent phase.
    std::set<std::string> first_epoch_grad_groups;

    std::vector<EpochRecord> phase(std::string_view name) const {
        std::vector<EpochRecord> out;
        for (const auto& e : epochs) {
            if (e.phase == name) out.push_back(e);
        }
        return out;
    }
};

struct BatchOutcome {
    Tensor loss;
    std::size_t correct1 = 0;
    std::size_t correct2 = 0;
};

namespace detail {

inline std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
    if (!logits.defined()) return 0;
    const std::vector<int> pred = argmax_rows(logits);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == labels[i];
    return ok;
}

inline void shuffle(std::vector<std::size_t>& order, Rng& rng) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
}

inline bool has_nonzero_grad(const std::vector<NamedTensor>& group) {
    for (const auto& [_, t] : group) {
        if (!t.has_grad()) continue;
        for (double g : t.grad()) {
            if (g != 0.0) return true;
        }
    }
    return false;
}

} // namespace detail

/// Minibatch Adam over `trainable` with a per-phase cosine/warm-restart
/// schedule. Incomplete trailing batches are dropped.
template <typename StepFn, typename EpochHook>
void train_phase(const std::string& name, const ParamGroups& groups,
                 const std::vector<std::string>& trainable_groups, std::size_t epochs,
                 const LrSchedule& schedule, const Dataset& data, std::size_t batch_size, Rng& rng,
                 TrainLog& log, StepFn&& step, EpochHook&& on_epoch) {
    std::vector<Tensor> trainable;
    for (const auto& g : trainable_groups) {
        for (const auto& [_, t] : groups.at(g)) trainable.push_back(t);
    }
    GradScope scope(all_tensors(groups), trainable);
    Adam adam(trainable);
    const std::size_t steps = data.size() / batch_size;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    log.first_epoch_grad_groups.clear();
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        detail::shuffle(order, rng);
        EpochRecord rec;
        rec.phase = name;
        rec.epoch = epoch + 1;
        double loss_sum = 0.0;
        std::size_t c1 = 0, c2 = 0, seen = 0;
        for (std::size_t s = 0; s < steps; ++s) {
            const Dataset batch =
                data.subset(std::span<const std::size_t>(order).subspan(s * batch_size, batch_size));
            adam.zero_grad();
            BatchOutcome out = step(batch, rng);
            backward(out.loss);
            if (epoch == 0) {
                for (const auto& g : trainable_groups) {
                    if (detail::has_nonzero_grad(groups.at(g))) log.first_epoch_grad_groups.insert(g);
                }
            }
            const double pos = static_cast<double>(epoch) +
                               static_cast<double>(s) / static_cast<double>(steps);
            adam.step(lr_at(pos, schedule));
            loss_sum += out.loss.item();
            c1 += out.correct1;
            c2 += out.correct2;
            seen += batch.size();
        }
        rec.loss = loss_sum / static_cast<double>(steps);
        rec.acc1 = static_cast<double>(c1) / static_cast<double>(seen);
        rec.acc2 = static_cast<double>(c2) / static_cast<double>(seen);
        on_epoch(rec);
        log.epochs.push_back(rec);
    }
}

/// Raw U1 and R over a whole dataset, without gradient recording.
inline std::pair<Tensor, Tensor> features_and_residual(const DeepScmModel& m, const Dataset& data) {
    GradScope scope(all_tensors(m.groups()), {});
    const Tensor u1 = encode_basic(data.x, m.theta1);
    const Tensor r = residual(u1, encode_enhanced(data.x, m.theta2), m.decorrelator);
    return {u1.detach(), r.detach()};
}

inline void fill_residual_diagnostics(const DeepScmModel& m, const Dataset& data, std::size_t n,
                                      EpochRecord& rec) {
    const auto [u1, r] = features_and_residual(m, data);
    const ResidualStats stats = residual_stats(u1, r);
    rec.r_norm_sq = stats.mean_sq_norm;
    rec.crosscov_max = stats.max_abs_cross_cov();
    rec.entropy_bound = stats.mean_sq_norm > 0.0 ? entropy_upper_bound(r, n)
                                                 : -std::numeric_limits<double>::infinity();
}

/// Stores training-set mean and 1/sd of R for evaluation-time standardization.
inline void fit_residual_norm(DeepScmModel& m, const Dataset& data) {
    const auto [u1, r] = features_and_residual(m, data);
    const std::size_t rows = r.rows(), cols = r.cols();
    auto shift = m.r_shift.mutable_data();
    auto gain = m.r_gain.mutable_data();
    for (std::size_t j = 0; j < cols; ++j) {
        double mu = 0.0, var = 0.0;
        for (std::size_t i = 0; i < rows; ++i) mu += r.at(i, j);
        mu /= static_cast<double>(rows);
        for (std::size_t i = 0; i < rows; ++i) var += (r.at(i, j) - mu) * (r.at(i, j) - mu);
        shift[j] = mu;
        gain[j] = 1.0 / std::sqrt(var / static_cast<double>(rows) + 1e-8);
    }
}

inline TrainLog train_stage1(DeepScmModel& m, const RunConfig& cfg, const Dataset& data, Rng& rng,
                             TrainLog log = {}) {
    if (cfg.mode != Mode::DeepScm) {
        throw ContractError("train_stage1: mode must be deepscm");
    }
    const NoiseLevels noise = noise_levels(cfg);
    train_phase("stage1", m.groups(), stage1_groups(), cfg.epochs1, cfg.schedule(cfg.lr1), data,
                cfg.batch_size, rng, log,
                [&](const Dataset& b, Rng& r) {
                    const ForwardResult f = forward_deepscm(m, b.x, cfg, Phase::Stage1, noise, r);
                    return BatchOutcome{loss_stage1(f.s1_logits, b.s1, f.x_hat1, b.x, cfg.weights),
                                        detail::count_correct(f.s1_logits, b.s1), 0};
                },
                [](EpochRecord&) {});
    return log;
}

inline TrainLog train_stage2(DeepScmModel& m, const RunConfig& cfg, const Dataset& data, Rng& rng,
                             TrainLog log = {}) {
    const NoiseLevels noise = noise_levels(cfg);
    train_phase("stage2", m.groups(), stage2_groups(), cfg.epochs2, cfg.schedule(cfg.lr2), data,
                cfg.batch_size, rng, log,
                [&](const Dataset& b, Rng& r) {
                    const ForwardResult f = forward_deepscm(m, b.x, cfg, Phase::Stage2, noise, r);
                    return BatchOutcome{
                        loss_stage2(f.s2_logits, b.s2, f.x_hat2, b.x, f.r, cfg.weights), 0,
                        detail::count_correct(f.s2_logits, b.s2)};
                },
                [&](EpochRecord& rec) { fill_residual_diagnostics(m, data, cfg.n, rec); });
    fit_residual_norm(m, data);
    return log;
}

inline TrainLog train_stage3(DeepScmModel& m, const RunConfig& cfg, const Dataset& data, Rng& rng,
                             TrainLog log = {}) {
    const NoiseLevels noise = noise_levels(cfg);
    std::vector<std::string> every = stage1_groups();
    every.insert(every.end(), stage2_groups().begin(), stage2_groups().end());
    train_phase("stage3", m.groups(), every, cfg.epochs3, cfg.schedule(cfg.lr3), data,
                cfg.batch_size, rng, log,
                [&](const Dataset& b, Rng& r) {
                    const ForwardResult f = forward_deepscm(m, b.x, cfg, Phase::Stage3, noise, r);
                    const Tensor l1 = loss_stage1(f.s1_logits, b.s1, f.x_hat1, b.x, cfg.weights);
                    const Tensor l2 = loss_stage2(f.s2_logits, b.s2, f.x_hat2, b.x, f.r, cfg.weights);
                    return BatchOutcome{loss_stage3(l1, l2, cfg.weights.beta),
                                        detail::count_correct(f.s1_logits, b.s1),
                                        detail::count_correct(f.s2_logits, b.s2)};
                },
                [&](EpochRecord& rec) { fill_residual_diagnostics(m, data, cfg.n, rec); });
    fit_residual_norm(m, data);
    return log;
}

struct DeepScmRun {
    DeepScmModel model;
    TrainLog log;
};

inline DeepScmModel init_deepscm(const RunConfig& cfg) {
    Rng rng = make_rng(cfg.seed, "init/deepscm");
    return make_deepscm(cfg, rng);
}

inline DeepScmRun train_deepscm(const RunConfig& cfg, const Dataset& data) {
    validate(cfg);
    DeepScmRun run{init_deepscm(cfg), {}};
    Rng r1 = make_rng(cfg.seed, "train/stage", 1);
    Rng r2 = make_rng(cfg.seed, "train/stage", 2);
    Rng r3 = make_rng(cfg.seed, "train/stage", 3);
    run.log = train_stage1(run.model, cfg, data, r1, std::move(run.log));
    run.log = train_stage2(run.model, cfg, data, r2, std::move(run.log));
    run.log = train_stage3(run.model, cfg, data, r3, std::move(run.log));
    return run;
}

struct CmRun {
    CmModel model;
    TrainLog log;
};

inline CmModel init_cm(const RunConfig& cfg) {
    Rng rng = make_rng(cfg.seed, "init/cm");
    return make_cm(cfg, rng);
}

/// Epoch budget: the transmitter phase gets epochs1+epochs2+epochs3, the
/// decoder-only phase of cm_rx1/cm_rx2 gets epochs1, both at lr1.
inline CmRun train_cm(const RunConfig& cfg, const Dataset& data) {
    validate(cfg);
    if (cfg.mode == Mode::DeepScm) {
        throw ContractError("train_cm: mode must be one of cm_joint, cm_rx1, cm_rx2");
    }
    CmRun run{init_cm(cfg), {}};
    CmModel& m = run.model;
    const NoiseLevels noise = noise_levels(cfg);
    const std::size_t main_epochs = cfg.epochs1 + cfg.epochs2 + cfg.epochs3;
    const auto groups = m.groups();
    auto rx_loss = [&](const ForwardResult& f, const Dataset& b, int rx) {
        return rx == 1 ? loss_stage1(f.s1_logits, b.s1, f.x_hat1, b.x, cfg.weights)
                       : add(cross_entropy(f.s2_logits, b.s2),
                             scale(mse(f.x_hat2, b.x), cfg.weights.lambda2));
    };
    auto phase = [&](const std::string& name, const std::vector<std::string>& trainable,
                     std::size_t epochs, bool rx1, bool rx2, Rng& rng) {
        train_phase(name, groups, trainable, epochs, cfg.schedule(cfg.lr1), data, cfg.batch_size,
                    rng, run.log,
                    [&](const Dataset& b, Rng& r) {
                        const ForwardResult f = forward_cm(m, b.x, cfg, false, noise, r);
                        Tensor loss;
                        if (rx1 && rx2) loss = add(rx_loss(f, b, 1), rx_loss(f, b, 2));
                        else loss = rx_loss(f, b, rx1 ? 1 : 2);
                        return BatchOutcome{std::move(loss), detail::count_correct(f.s1_logits, b.s1),
                                            detail::count_correct(f.s2_logits, b.s2)};
                    },
                    [](EpochRecord&) {});
    };
    Rng ra = make_rng(cfg.seed, "train/cm", 1);
    Rng rb = make_rng(cfg.seed, "train/cm", 2);
    switch (cfg.mode) {
    case Mode::CmJoint:
        phase("cm_joint", {"theta", "alpha", "psi1", "eta1", "psi2", "eta2"}, main_epochs, true, true, ra);
        break;
    case Mode::CmRx1:
        phase("cm_tx_rx1", {"theta", "alpha", "psi1", "eta1"}, main_epochs, true, false, ra);
        phase("cm_fit_rx2", {"psi2", "eta2"}, cfg.epochs1, false, true, rb);
        break;
    case Mode::CmRx2:
        phase("cm_tx_rx2", {"theta", "alpha", "psi2", "eta2"}, main_epochs, false, true, ra);
        phase("cm_fit_rx1", {"psi1", "eta1"}, cfg.epochs1, true, false, rb);
        break;
    default: break;
    }
    return run;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct Metrics {
    double acc1 = 0.0, acc2 = 0.0;
    double psnr1 = 0.0, psnr2 = 0.0;
    double acc1_se = 0.0, acc2_se = 0.0, psnr1_se = 0.0, psnr2_se = 0.0;
    double r_norm_sq = std::numeric_limits<double>::quiet_NaN();
    double crosscov_max = std::numeric_limits<double>::quiet_NaN();
    double entropy_bound = std::numeric_limits<double>::quiet_NaN();
};

struct EvalOptions {
    std::size_t trials = 20;
    std::uint64_t seed = 1;
    std::optional<double> sigma2_rx1;
    std::optional<double> sigma2_rx2;
    std::size_t batch_size = 256;
};

inline EvalOptions eval_options(const RunConfig& cfg) {
    EvalOptions o;
    o.trials = cfg.eval_trials;
    o.seed = cfg.seed;
    return o;
}

namespace detail {

struct RunningMean {
    double sum = 0.0, sum_sq = 0.0;
    std::size_t count = 0;

    void add(double v) {
        sum += v;
        sum_sq += v * v;
        ++count;
    }
    double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
    double se() const {
        if (count < 2) return 0.0;
        const double n = static_cast<double>(count);
        const double var = std::max(0.0, (sum_sq - sum * sum / n) / (n - 1.0));
        return std::sqrt(var / n);
    }
};

template <typename Forward>
Metrics evaluate_with(const Dataset& test, const EvalOptions& opt, Forward&& forward) {
    RunningMean a1, a2, p1, p2;
    const std::size_t k = test.x.cols();
    for (std::size_t t = 0; t < opt.trials; ++t) {
        Rng rng = make_rng(opt.seed, "eval", t);
        for (std::size_t lo = 0; lo < test.size(); lo += opt.batch_size) {
            const std::size_t hi = std::min(test.size(), lo + opt.batch_size);
            std::vector<std::size_t> rows(hi - lo);
            std::iota(rows.begin(), rows.end(), lo);
            const Dataset b = test.subset(rows);
            const ForwardResult f = forward(b.x, rng);
            const std::vector<int> pred1 = argmax_rows(f.s1_logits);
            const std::vector<int> pred2 = argmax_rows(f.s2_logits);
            for (std::size_t i = 0; i < b.size(); ++i) {
                a1.add(pred1[i] == b.s1[i] ? 1.0 : 0.0);
                a2.add(pred2[i] == b.s2[i] ? 1.0 : 0.0);
                const auto xi = b.x.data().subspan(i * k, k);
                p1.add(psnr(xi, f.x_hat1.data().subspan(i * k, k)));
                p2.add(psnr(xi, f.x_hat2.data().subspan(i * k, k)));
            }
        }
    }
    Metrics m;
    m.acc1 = a1.mean();
    m.acc2 = a2.mean();
    m.psnr1 = p1.mean();
    m.psnr2 = p2.mean();
    m.acc1_se = a1.se();
    m.acc2_se = a2.se();
    m.psnr1_se = p1.se();
    m.psnr2_se = p2.se();
    return m;
}

} // namespace detail

/// Monte Carlo over test samples and channel noise with hard symbol sampling.
inline Metrics evaluate(const DeepScmModel& m, const RunConfig& cfg, const Dataset& test,
                        const EvalOptions& opt) {
    GradScope scope(all_tensors(m.groups()), {});
    NoiseLevels noise = noise_levels(cfg);
    if (opt.sigma2_rx1) noise.sigma2_1 = *opt.sigma2_rx1;
    if (opt.sigma2_rx2) noise.sigma2_2 = *opt.sigma2_rx2;
    Metrics out = detail::evaluate_with(test, opt, [&](const Tensor& x, Rng& rng) {
        return forward_deepscm(m, x, cfg, Phase::Eval, noise, rng);
    });
    const auto [u1, r] = features_and_residual(m, test);
    const ResidualStats stats = residual_stats(u1, r);
    out.r_norm_sq = stats.mean_sq_norm;
    out.crosscov_max = stats.max_abs_cross_cov();
    out.entropy_bound = stats.mean_sq_norm > 0.0 ? entropy_upper_bound(r, cfg.n)
                                                 : -std::numeric_limits<double>::infinity();
    return out;
}

inline Metrics evaluate(const CmModel& m, const RunConfig& cfg, const Dataset& test,
                        const EvalOptions& opt) {
    GradScope scope(all_tensors(m.groups()), {});
    NoiseLevels noise = noise_levels(cfg);
    if (opt.sigma2_rx1) noise.sigma2_1 = *opt.sigma2_rx1;
    if (opt.sigma2_rx2) noise.sigma2_2 = *opt.sigma2_rx2;
    return detail::evaluate_with(test, opt, [&](const Tensor& x, Rng& rng) {
        return forward_cm(m, x, cfg, true, noise, rng);
    });
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

struct Splits {
    Dataset train;
    Dataset test;
};

/// Train/test draws from independent streams of the same source.
inline Splits make_splits(const RunConfig& cfg) {
    const HierSource source(cfg.data);
    return {source.generate(cfg.train_count(), "train"), source.generate(cfg.test_count(), "test")};
}

struct MetricsRow {
    RunConfig cfg;
    Metrics metrics;
};

inline const std::vector<std::string>& metrics_header() {
    static const std::vector<std::string> h = {
        "mode", "a", "n", "snr1_db", "snr2_db", "acc1", "acc2", "psnr1", "psnr2",
        "r_norm_sq", "crosscov_max", "entropy_bound", "seed"};
    return h;
}

inline Table metrics_table(const std::vector<MetricsRow>& rows) {
    Table t;
    t.header = metrics_header();
    for (const auto& [cfg, m] : rows) {
        t.rows.push_back({to_string(cfg.mode), format_number(cfg.paf), std::to_string(cfg.n),
                          format_number(cfg.snr1_db), format_number(cfg.snr2_db),
                          format_number(m.acc1), format_number(m.acc2), format_number(m.psnr1),
                          format_number(m.psnr2), format_number(m.r_norm_sq),
                          format_number(m.crosscov_max), format_number(m.entropy_bound),
                          std::to_string(cfg.seed)});
    }
    return t;
}

/// Train per cfg.mode on fresh splits, then evaluate.
inline MetricsRow run_experiment(const RunConfig& cfg) {
    validate(cfg);
    const Splits s = make_splits(cfg);
    if (cfg.mode == Mode::DeepScm) {
        const DeepScmRun run = train_deepscm(cfg, s.train);
        return {cfg, evaluate(run.model, cfg, s.test, eval_options(cfg))};
    }
    const CmRun run = train_cm(cfg, s.train);
    return {cfg, evaluate(run.model, cfg, s.test, eval_options(cfg))};
}

/// DeepSCM at each PAF; every grid point reuses the run seed so points are
/// paired (common random numbers).
inline std::vector<MetricsRow> paf_sweep(const RunConfig& cfg, std::span<const double> a_values) {
    for (double a : a_values) require_paf(a);
    std::vector<MetricsRow> rows;
    for (double a : a_values) {
        RunConfig point = cfg;
        point.mode = Mode::DeepScm;
        point.paf = a;
        rows.push_back(run_experiment(point));
    }
    return rows;
}

/// DeepSCM and cm_joint, same seed, at each Receiver-2 SNR.
inline std::vector<MetricsRow> snr_sweep(const RunConfig& cfg, std::span<const double> snr2_values) {
    for (double s : snr2_values) {
        validate_degraded({cfg.power, cfg.snr1_db, s});
    }
    std::vector<MetricsRow> rows;
    for (double s : snr2_values) {
        for (Mode mode : {Mode::DeepScm, Mode::CmJoint}) {
            RunConfig point = cfg;
            point.mode = mode;
            point.snr2_db = s;
            rows.push_back(run_experiment(point));
        }
    }
    return rows;
}

/// DeepSCM and cm_joint, same seed, at each channel-use count.
inline std::vector<MetricsRow> rate_sweep(const RunConfig& cfg, std::span<const std::size_t> n_values) {
    for (std::size_t n : n_values) {
        if (n == 0) throw ContractError("rate_sweep: n must be at least 1");
    }
    std::vector<MetricsRow> rows;
    for (std::size_t n : n_values) {
        for (Mode mode : {Mode::DeepScm, Mode::CmJoint}) {
            RunConfig point = cfg;
            point.mode = mode;
            point.n = n;
            rows.push_back(run_experiment(point));
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Constellation usage
// ---------------------------------------------------------------------------

struct Histogram {
    std::vector<Complex> points;
    std::vector<std::size_t> counts;

    std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }
};

inline Table histogram_table(const Histogram& h) {
    Table t;
    t.header = {"i", "q", "count"};
    for (std::size_t p = 0; p < h.points.size(); ++p) {
        t.rows.push_back({format_number(h.points[p].real()), format_number(h.points[p].imag()),
                          std::to_string(h.counts[p])});
    }
    return t;
}

namespace detail {

/// Point index of channel use `use` in the sampled per-axis levels.
inline std::size_t point_index(const std::vector<int>& levels, std::size_t use, std::size_t side) {
    return static_cast<std::size_t>(levels[2 * use]) * side + static_cast<std::size_t>(levels[2 * use + 1]);
}

template <typename Forward>
Histogram histogram_with(const Dataset& data, std::size_t trials, Histogram h,
                         std::uint64_t seed, Forward&& forward) {
    h.counts.assign(h.points.size(), 0);
    Rng rng = make_rng(seed, "hist");
    constexpr std::size_t kBatch = 256;
    for (std::size_t lo = 0; lo < trials; lo += kBatch) {
        const std::size_t hi = std::min(trials, lo + kBatch);
        std::vector<std::size_t> rows;
        for (std::size_t t = lo; t < hi; ++t) rows.push_back(t % data.size());
        const Dataset b = data.subset(rows);
        forward(b.x, rng, h.counts);
    }
    return h;
}

} // namespace detail

/// Counts of transmitted super-constellation points over `trials`
/// transmissions (hard sampling), indexed by the sampled symbol labels.
inline Histogram constellation_histogram(const DeepScmModel& m, const RunConfig& cfg,
                                         const Dataset& data, std::size_t trials) {
    GradScope scope(all_tensors(m.groups()), {});
    const Constellation c1 = make_square_qam(cfg.m1), c2 = make_square_qam(cfg.m2);
    Histogram h{superpose(c1, c2, cfg.paf, cfg.power).points, {}};
    const NoiseLevels noise = noise_levels(cfg);
    return detail::histogram_with(data, trials, std::move(h), cfg.seed,
                                  [&](const Tensor& x, Rng& rng, std::vector<std::size_t>& counts) {
        const ForwardResult f = forward_deepscm(m, x, cfg, Phase::Eval, noise, rng);
        const std::vector<int> l1 = argmax_rows(f.onehots1), l2 = argmax_rows(f.onehots2);
        for (std::size_t use = 0; use < x.rows() * cfg.n; ++use) {
            const std::size_t inner = detail::point_index(l1, use, c1.side());
            const std::size_t outer = detail::point_index(l2, use, c2.side());
            ++counts[inner * c2.order + outer];
        }
    });
}

inline Histogram constellation_histogram(const CmModel& m, const RunConfig& cfg, const Dataset& data,
                                         std::size_t trials) {
    GradScope scope(all_tensors(m.groups()), {});
    const Constellation c = make_square_qam(cfg.m1 * cfg.m2);
    Histogram h;
    for (const Complex& p : c.points) h.points.push_back(std::sqrt(cfg.power) * p);
    const NoiseLevels noise = noise_levels(cfg);
    return detail::histogram_with(data, trials, std::move(h), cfg.seed,
                                  [&](const Tensor& x, Rng& rng, std::vector<std::size_t>& counts) {
        const ForwardResult f = forward_cm(m, x, cfg, true, noise, rng);
        const std::vector<int> l = argmax_rows(f.onehots1);
        for (std::size_t use = 0; use < x.rows() * cfg.n; ++use) {
            ++counts[detail::point_index(l, use, c.side())];
        }
    });
}

inline Table constellation_table(const std::vector<Complex>& points) {
    Table t;
    t.header = {"point_index", "i", "q"};
    for (std::size_t p = 0; p < points.size(); ++p) {
        t.rows.push_back({std::to_string(p), format_number(points[p].real()),
                          format_number(points[p].imag())});
    }
    return t;
}

inline Table training_table(const TrainLog& log) {
    Table t;
    t.header = {"phase", "epoch", "loss", "acc1", "acc2", "r_norm_sq", "crosscov_max", "entropy_bound"};
    for (const auto& e : log.epochs) {
        t.rows.push_back({e.phase, std::to_string(e.epoch), format_number(e.loss),
                          format_number(e.acc1), format_number(e.acc2), format_number(e.r_norm_sq),
                          format_number(e.crosscov_max), format_number(e.entropy_bound)});
    }
    return t;
}

/// Per-epoch decorrelator diagnostics of the phases that train it.
inline Table decorrelator_table(const TrainLog& log) {
    Table t;
    t.header = {"epoch", "mean_sq_norm", "max_abs_cross_cov", "entropy_bound"};
    std::size_t epoch = 0;
    for (const auto& e : log.epochs) {
        if (std::isnan(e.r_norm_sq)) continue;
        t.rows.push_back({std::to_string(++epoch), format_number(e.r_norm_sq),
                          format_number(e.crosscov_max), format_number(e.entropy_bound)});
    }
    return t;
}

} // namespace deepscm
