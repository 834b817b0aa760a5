#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

#include "deepscm/deepscm.hpp"

using namespace deepscm;

namespace {

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = ".";
};

RunConfig resolve_config(const Globals& g) {
    RunConfig cfg = g.config_path.empty() ? RunConfig{} : load_config(g.config_path);
    if (g.seed) cfg.seed = *g.seed;
    try {
        validate(cfg);
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::Io) throw;
        throw ConfigError(std::string("invalid configuration: ") + e.what());
    }
    return cfg;
}

std::string out_path(const Globals& g, const std::string& name) {
    std::error_code ec;
    std::filesystem::create_directories(g.out_dir, ec);
    if (ec) {
        throw IoError("cannot create output directory " + g.out_dir + ": " + ec.message());
    }
    return (std::filesystem::path(g.out_dir) / name).string();
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* flag) {
    std::vector<T> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::istringstream one(item);
        T v{};
        const bool negative_count = std::is_unsigned_v<T> && item.find('-') != std::string::npos;
        if (negative_count || !(one >> v) || !(one >> std::ws).eof()) {
            throw ConfigError(std::string(flag) + ": cannot parse '" + item + "'");
        }
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError(std::string(flag) + ": empty list");
    return out;
}

/// A trained or loaded model of either kind.
struct Trained {
    std::optional<DeepScmModel> deepscm;
    std::optional<CmModel> cm;
    TrainLog log;

    std::vector<NamedTensor> named() const { return deepscm ? deepscm->named() : cm->named(); }
};

Trained fresh_model(const RunConfig& cfg) {
    Trained t;
    if (cfg.mode == Mode::DeepScm) t.deepscm = init_deepscm(cfg);
    else t.cm = init_cm(cfg);
    return t;
}

Trained train(const RunConfig& cfg, const Dataset& data) {
    Trained t;
    if (cfg.mode == Mode::DeepScm) {
        DeepScmRun run = train_deepscm(cfg, data);
        t.deepscm = std::move(run.model);
        t.log = std::move(run.log);
    } else {
        CmRun run = train_cm(cfg, data);
        t.cm = std::move(run.model);
        t.log = std::move(run.log);
    }
    return t;
}

Trained load(const RunConfig& cfg, const std::string& path) {
    Trained t = fresh_model(cfg);
    auto named = t.named();
    load_checkpoint(path, named);
    return t;
}

Metrics evaluate(const Trained& t, const RunConfig& cfg, const Dataset& test) {
    return t.deepscm ? evaluate(*t.deepscm, cfg, test, eval_options(cfg))
                     : evaluate(*t.cm, cfg, test, eval_options(cfg));
}

void write_metrics(const Globals& g, const std::vector<MetricsRow>& rows) {
    emit_csv(out_path(g, "metrics.csv"), metrics_table(rows));
}

int cmd_train(const Globals& g) {
    const RunConfig cfg = resolve_config(g);
    const Splits s = make_splits(cfg);
    const Trained t = train(cfg, s.train);
    save_checkpoint(out_path(g, "checkpoint.bin"), t.named());
    emit_csv(out_path(g, "training.csv"), training_table(t.log));
    if (t.deepscm) emit_csv(out_path(g, "decorrelator.csv"), decorrelator_table(t.log));
    write_metrics(g, {{cfg, evaluate(t, cfg, s.test)}});
    return 0;
}

int cmd_eval(const Globals& g, const std::string& checkpoint) {
    const RunConfig cfg = resolve_config(g);
    const Trained t = load(cfg, checkpoint);
    write_metrics(g, {{cfg, evaluate(t, cfg, make_splits(cfg).test)}});
    return 0;
}

int cmd_hist(const Globals& g, const std::string& checkpoint, std::size_t trials) {
    const RunConfig cfg = resolve_config(g);
    const Splits s = make_splits(cfg);
    const Trained t = checkpoint.empty() ? train(cfg, s.train) : load(cfg, checkpoint);
    const Histogram h = t.deepscm ? constellation_histogram(*t.deepscm, cfg, s.test, trials)
                                  : constellation_histogram(*t.cm, cfg, s.test, trials);
    emit_csv(out_path(g, "hist.csv"), histogram_table(h));
    return 0;
}

int cmd_dump_constellation(const Globals& g) {
    const RunConfig cfg = resolve_config(g);
    std::vector<Complex> points;
    if (cfg.mode == Mode::DeepScm) {
        points = superpose(make_square_qam(cfg.m1), make_square_qam(cfg.m2), cfg.paf, cfg.power).points;
    } else {
        for (const Complex& p : make_square_qam(cfg.m1 * cfg.m2).points) points.push_back(std::sqrt(cfg.power) * p);
    }
    emit_csv(out_path(g, "constellation.csv"), constellation_table(points));
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Superposition coded modulation over a two-receiver degraded broadcast channel"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed = 0;
    app.add_option("--config", g.config_path, "key=value configuration file");
    auto* seed_opt = app.add_option("--seed", seed, "override the configured seed");
    app.add_option("--out", g.out_dir, "output directory (created if missing)");

    std::string checkpoint, values;
    std::size_t trials = 2000;
    auto* train_cmd = app.add_subcommand("train", "train per the configured mode, evaluate, save checkpoint");
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();
    auto* paf_cmd = app.add_subcommand("sweep-paf", "train and evaluate DeepSCM at each power allocation factor");
    paf_cmd->add_option("--values", values, "comma-separated a values")->required();
    auto* snr_cmd = app.add_subcommand("sweep-snr", "DeepSCM and cm_joint at each Receiver-2 SNR (dB)");
    snr_cmd->add_option("--values", values, "comma-separated SNR values")->required();
    auto* rate_cmd = app.add_subcommand("sweep-rate", "DeepSCM and cm_joint at each channel-use count");
    rate_cmd->add_option("--values", values, "comma-separated n values")->required();
    auto* hist_cmd = app.add_subcommand("hist", "histogram of transmitted constellation points");
    hist_cmd->add_option("--checkpoint", checkpoint, "checkpoint to load instead of training");
    hist_cmd->add_option("--trials", trials, "number of transmitted sequences")->check(CLI::PositiveNumber);
    auto* dump_cmd = app.add_subcommand("dump-constellation", "write the configured constellation points");
    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    if (*seed_opt) g.seed = seed;

    try {
        if (*train_cmd) return cmd_train(g);
        if (*eval_cmd) return cmd_eval(g, checkpoint);
        if (*hist_cmd) return cmd_hist(g, checkpoint, trials);
        if (*dump_cmd) return cmd_dump_constellation(g);
        const RunConfig cfg = resolve_config(g);
        if (*paf_cmd) {
            const auto a = parse_list<double>(values, "--values");
            write_metrics(g, paf_sweep(cfg, a));
        } else if (*snr_cmd) {
            const auto s = parse_list<double>(values, "--values");
            write_metrics(g, snr_sweep(cfg, s));
        } else if (*rate_cmd) {
            const auto n = parse_list<std::size_t>(values, "--values");
            write_metrics(g, rate_sweep(cfg, n));
        }
        return 0;
    } catch (const Error& e) {
        std::cerr << "deepscm: " << e.what() << '\n';
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "deepscm: " << e.what() << '\n';
        return 3;
    }
}
