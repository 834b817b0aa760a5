#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "deepscm/channel.hpp"
#include "deepscm/constellation.hpp"
#include "deepscm/error.hpp"
#include "deepscm/hier_data.hpp"
#include "deepscm/models.hpp"
#include "deepscm/optim.hpp"

namespace deepscm {

enum class Mode { DeepScm, CmJoint, CmRx1, CmRx2 };

inline std::string to_string(Mode m) {
    switch (m) {
    case Mode::DeepScm: return "deepscm";
    case Mode::CmJoint: return "cm_joint";
    case Mode::CmRx1: return "cm_rx1";
    case Mode::CmRx2: return "cm_rx2";
    }
    return "?";
}

inline Mode parse_mode(std::string_view s) {
    if (s == "deepscm") return Mode::DeepScm;
    if (s == "cm_joint") return Mode::CmJoint;
    if (s == "cm_rx1") return Mode::CmRx1;
    if (s == "cm_rx2") return Mode::CmRx2;
    throw ConfigError("unknown mode '" + std::string(s) + "'");
}

/// How symbol sequences meet the power constraint.
enum class PowerNorm { Sequence, Expected };

/// What the outer layer carries in stage 1: nothing (the inner layer is
/// sent at power aP) or the inner layer at full power P.
enum class Stage1Power { InnerOnly, Full };

struct RunConfig {
    Mode mode = Mode::DeepScm;
    std::size_t m1 = 4;
    std::size_t m2 = 4;
    double paf = 0.8;
    double power = 1.0;
    std::size_t n = 8;
    double snr1_db = -5.0;
    double snr2_db = 20.0;
    LossWeights weights;
    std::size_t epochs1 = 100, epochs2 = 150, epochs3 = 50;
    double lr1 = 2e-4, lr2 = 2e-4, lr3 = 5e-5;
    double lr_min = 1e-5;
    double restart_t0 = 10.0;
    double restart_mult = 2.0;
    std::size_t batch_size = 64;
    std::size_t hidden = 128;
    double temperature = 1.0;
    bool train_hard = true;
    PowerNorm power_norm = PowerNorm::Sequence;
    Stage1Power stage1_power = Stage1Power::InnerOnly;
    std::size_t eval_trials = 20;
    std::size_t dataset_size = 2500;
    double train_fraction = 0.8;
    std::uint64_t seed = 1;
    HierSpec data;

    ChannelConfig channel() const { return {power, snr1_db, snr2_db}; }
    std::size_t train_count() const {
        return static_cast<std::size_t>(static_cast<double>(dataset_size) * train_fraction);
    }
    std::size_t test_count() const { return dataset_size - train_count(); }

    LrSchedule schedule(double eta_max) const { return {eta_max, lr_min, restart_t0, restart_mult}; }
};

/// Table III schedule: 100/150/50 epochs at 2e-4/2e-4/5e-5.
inline RunConfig full_schedule() { return RunConfig{}; }

/// Short schedule that finishes in seconds on the synthetic source.
inline RunConfig desk_preset() {
    RunConfig cfg;
    cfg.epochs1 = 20;
    cfg.epochs2 = 30;
    cfg.epochs3 = 10;
    cfg.lr1 = 2e-3;
    cfg.lr2 = 2e-3;
    cfg.lr3 = 5e-4;
    cfg.hidden = 64;
    cfg.batch_size = 32;
    return cfg;
}

inline void validate(const RunConfig& cfg) {
    qam_side(cfg.m1);
    qam_side(cfg.m2);
    require_paf(cfg.paf);
    if (!(cfg.power > 0.0)) throw ContractError("config: power must be positive");
    if (cfg.n == 0) throw ContractError("config: n must be at least 1");
    validate_degraded(cfg.channel());
    validate(cfg.weights);
    if (cfg.epochs1 < 1 || cfg.epochs2 < 1 || cfg.epochs3 < 1) {
        throw ContractError("config: stage epoch counts must be at least 1");
    }
    if (!(cfg.lr1 > 0.0 && cfg.lr2 > 0.0 && cfg.lr3 > 0.0) || cfg.lr_min < 0.0) {
        throw ContractError("config: learning rates must be positive");
    }
    if (cfg.batch_size < 2) throw ContractError("config: batch size must be at least 2");
    if (cfg.hidden < 1) throw ContractError("config: hidden width must be at least 1");
    if (!(cfg.temperature > 0.0)) throw ContractError("config: temperature must be positive");
    if (cfg.eval_trials < 1) throw ContractError("config: eval_trials must be at least 1");
    if (!(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0)) {
        throw ContractError("config: train_fraction must be in (0, 1)");
    }
    if (cfg.train_count() < cfg.batch_size || cfg.test_count() < 1) {
        throw ContractError("config: dataset too small for the batch size");
    }
    validate(cfg.data);
}

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* first = value.data();
    const char* last = first + value.size();
    if constexpr (std::is_floating_point_v<T>) {
        // from_chars for doubles is incomplete on older toolchains.
        char* end = nullptr;
        out = std::strtod(first, &end);
        if (end != last || value.empty()) {
            throw ConfigError("config: '" + key + "' expects a number, got '" + value + "'");
        }
    } else {
        auto [ptr, ec] = std::from_chars(first, last, out);
        if (ec != std::errc{} || ptr != last) {
            throw ConfigError("config: '" + key + "' expects an integer, got '" + value + "'");
        }
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config: '" + key + "' expects true/false, got '" + value + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

template <typename T>
Setter num(T RunConfig::*field) {
    return [field](RunConfig& c, const std::string& k, const std::string& v) {
        c.*field = parse_number<T>(k, v);
    };
}

template <typename T>
Setter data_num(T HierSpec::*field) {
    return [field](RunConfig& c, const std::string& k, const std::string& v) {
        c.data.*field = parse_number<T>(k, v);
    };
}

template <typename T>
Setter weight(T LossWeights::*field) {
    return [field](RunConfig& c, const std::string& k, const std::string& v) {
        c.weights.*field = parse_number<T>(k, v);
    };
}

inline const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"mode", [](RunConfig& c, const std::string&, const std::string& v) { c.mode = parse_mode(v); }},
        {"m1", num(&RunConfig::m1)},
        {"m2", num(&RunConfig::m2)},
        {"paf", num(&RunConfig::paf)},
        {"power", num(&RunConfig::power)},
        {"n", num(&RunConfig::n)},
        {"snr1_db", num(&RunConfig::snr1_db)},
        {"snr2_db", num(&RunConfig::snr2_db)},
        {"lambda1", weight(&LossWeights::lambda1)},
        {"lambda2", weight(&LossWeights::lambda2)},
        {"lambda3", weight(&LossWeights::lambda3)},
        {"beta", weight(&LossWeights::beta)},
        {"epochs1", num(&RunConfig::epochs1)},
        {"epochs2", num(&RunConfig::epochs2)},
        {"epochs3", num(&RunConfig::epochs3)},
        {"lr1", num(&RunConfig::lr1)},
        {"lr2", num(&RunConfig::lr2)},
        {"lr3", num(&RunConfig::lr3)},
        {"lr_min", num(&RunConfig::lr_min)},
        {"restart_t0", num(&RunConfig::restart_t0)},
        {"restart_mult", num(&RunConfig::restart_mult)},
        {"batch_size", num(&RunConfig::batch_size)},
        {"hidden", num(&RunConfig::hidden)},
        {"temperature", num(&RunConfig::temperature)},
        {"train_hard", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train_hard = parse_bool(k, v);
         }},
        {"power_norm", [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v == "sequence") c.power_norm = PowerNorm::Sequence;
             else if (v == "expected") c.power_norm = PowerNorm::Expected;
             else throw ConfigError("config: '" + k + "' expects sequence|expected");
         }},
        {"stage1_power", [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v == "inner_only") c.stage1_power = Stage1Power::InnerOnly;
             else if (v == "full") c.stage1_power = Stage1Power::Full;
             else throw ConfigError("config: '" + k + "' expects inner_only|full");
         }},
        {"eval_trials", num(&RunConfig::eval_trials)},
        {"dataset_size", num(&RunConfig::dataset_size)},
        {"train_fraction", num(&RunConfig::train_fraction)},
        {"seed", num(&RunConfig::seed)},
        {"l1", data_num(&HierSpec::L1)},
        {"l2", data_num(&HierSpec::L2)},
        {"k", data_num(&HierSpec::k)},
        {"coarse_sep", data_num(&HierSpec::coarse_sep)},
        {"fine_sep", data_num(&HierSpec::fine_sep)},
        {"noise_sd", data_num(&HierSpec::noise_sd)},
        {"data_seed", data_num(&HierSpec::seed)},
    };
    return table;
}

} // namespace detail

inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto& table = detail::setters();
    if (key == "preset") {
        if (value == "desk") cfg = desk_preset();
        else if (value == "full") cfg = full_schedule();
        else throw ConfigError("config: unknown preset '" + value + "'");
        return;
    }
    auto it = table.find(key);
    if (it == table.end()) {
        throw ConfigError("config: unknown key '" + key + "'");
    }
    it->second(cfg, key, value);
}

/// Flat `key = value` lines, '#' starts a comment. A `preset` line resets
/// every field to that preset, so it belongs at the top of the file.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const auto hash = raw.find('#');
        const std::string line = detail::trim(std::string_view(raw).substr(0, hash));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        }
        apply_setting(base, detail::trim(std::string_view(line).substr(0, eq)),
                      detail::trim(std::string_view(line).substr(eq + 1)));
    }
    return base;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open config " + path);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

} // namespace deepscm
