#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rpc/error.hpp"
#include "rpc/eval.hpp"
#include "rpc/synthdata.hpp"
#include "rpc/trainer.hpp"

namespace rpc {

/// One ablation variant; a disabled component is zeroed in the loss weights
/// (fusion: alpha = 0, align: lambda1 = 0, discover: lambda2 = 0).
struct AblationSpec {
    std::string name;
    bool fusion = true;
    bool align = true;
    bool discover = true;
};

inline std::vector<AblationSpec> standard_ablation() {
    return {{"RPC (full)", true, true, true},
            {"w/o Embedding Fusion", false, true, true},
            {"w/o L_align", true, false, true},
            {"w/o L_discover", true, true, false}};
}

inline TrainConfig apply_ablation(TrainConfig cfg, const AblationSpec& spec) {
    if (!spec.fusion) {
        cfg.loss.alpha = 0.0;
    }
    if (!spec.align) {
        cfg.loss.lambda1 = 0.0;
    }
    if (!spec.discover) {
        cfg.loss.lambda2 = 0.0;
    }
    return cfg;
}

struct Summary {
    double mean = 0.0;
    double spread = 0.0;  // population standard deviation
    std::size_t n = 0;
};

inline Summary summarize(std::span<const double> v) {
    Summary s;
    s.n = v.size();
    if (v.empty()) {
        return s;
    }
    for (double x : v) {
        s.mean += x;
    }
    s.mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) {
        ss += (x - s.mean) * (x - s.mean);
    }
    s.spread = std::sqrt(ss / static_cast<double>(v.size()));
    return s;
}

/// Result of one training run, or the error that stopped it.
struct RunOutcome {
    std::uint64_t world_seed = 0;
    std::uint64_t train_seed = 0;
    std::optional<GcdAccuracy> accuracy;
    std::string error;
};

inline RunOutcome train_and_score(const TrainConfig& cfg, const WorldConfig& world_cfg,
                                  const std::filesystem::path& out_dir = {}) {
    RunOutcome r{world_cfg.seed, cfg.seed, std::nullopt, {}};
    try {
        const World world = generate_world(world_cfg);
        RunOptions opt;
        opt.output_dir = out_dir;
        const RunResult res = run_training<Objective::rpc>(cfg, world.split, make_evaluator(world.truth), opt);
        r.accuracy = gcd_accuracy(predict_clusters(res.params, world.split.unlabeled), world.truth);
    } catch (const Error& e) {
        r.error = e.what();
    }
    return r;
}

struct AblationRow {
    std::string name;
    std::vector<RunOutcome> runs;

    std::vector<double> values(double GcdAccuracy::*field) const {
        std::vector<double> v;
        for (const auto& r : runs) {
            if (r.accuracy) {
                v.push_back((*r.accuracy).*field);
            }
        }
        return v;
    }

    std::vector<double> values(std::optional<double> GcdAccuracy::*field) const {
        std::vector<double> v;
        for (const auto& r : runs) {
            if (r.accuracy && ((*r.accuracy).*field)) {
                v.push_back(*((*r.accuracy).*field));
            }
        }
        return v;
    }

    Summary all() const { return summarize(values(&GcdAccuracy::all)); }
    Summary old_acc() const { return summarize(values(&GcdAccuracy::old_acc)); }
    Summary new_acc() const { return summarize(values(&GcdAccuracy::new_acc)); }

    std::size_t failures() const {
        std::size_t n = 0;
        for (const auto& r : runs) {
            n += !r.accuracy;
        }
        return n;
    }
};

struct AblationTable {
    std::vector<AblationRow> rows;

    const AblationRow* find(std::string_view name) const {
        for (const auto& r : rows) {
            if (r.name == name) {
                return &r;
            }
        }
        return nullptr;
    }
};

inline std::string slug(std::string_view name) {
    std::string s;
    for (char c : name) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        } else if (!s.empty() && s.back() != '_') {
            s += '_';
        }
    }
    while (!s.empty() && s.back() == '_') {
        s.pop_back();
    }
    return s;
}

/// Trains every variant on every (world, seed) pair. Failed runs are kept in
/// the table with their error; they do not stop the remaining runs.
inline AblationTable run_ablation(const TrainConfig& base, std::span<const AblationSpec> specs,
                                  std::span<const WorldConfig> worlds, std::span<const std::uint64_t> seeds,
                                  const std::filesystem::path& out_root = {}) {
    AblationTable t;
    for (const auto& spec : specs) {
        AblationRow row{spec.name, {}};
        for (const auto& w : worlds) {
            for (std::uint64_t seed : seeds) {
                TrainConfig cfg = apply_ablation(base, spec);
                cfg.seed = seed;
                std::filesystem::path dir;
                if (!out_root.empty()) {
                    dir = out_root / slug(spec.name) /
                          ("world" + std::to_string(w.seed) + "_seed" + std::to_string(seed));
                }
                row.runs.push_back(train_and_score(cfg, w, dir));
            }
        }
        t.rows.push_back(std::move(row));
    }
    return t;
}

namespace detail {

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline std::string pct(const Summary& s) {
    if (s.n == 0) {
        return "-";
    }
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.1f +/- %.1f", 100.0 * s.mean, 100.0 * s.spread);
    return buf;
}

inline std::string pad(std::string s, std::size_t w) {
    if (s.size() < w) {
        s.append(w - s.size(), ' ');
    }
    return s;
}

}  // namespace detail

inline std::string ablation_csv(const AblationTable& t) {
    std::string s = "variant,all_mean,all_spread,old_mean,old_spread,new_mean,new_spread,runs,failures\n";
    for (const auto& r : t.rows) {
        s += r.name;
        for (const Summary& m : {r.all(), r.old_acc(), r.new_acc()}) {
            s += ',' + detail::fmt(m.mean) + ',' + detail::fmt(m.spread);
        }
        s += ',' + std::to_string(r.runs.size()) + ',' + std::to_string(r.failures()) + '\n';
    }
    return s;
}

inline std::string ablation_text(const AblationTable& t) {
    std::size_t w = 7;
    for (const auto& r : t.rows) {
        w = std::max(w, r.name.size());
    }
    w += 2;
    const std::size_t c = 16;
    std::string s = detail::pad("Variant", w) + detail::pad("All", c) + detail::pad("Old", c) + "New\n";
    for (const auto& r : t.rows) {
        s += detail::pad(r.name, w) + detail::pad(detail::pct(r.all()), c) + detail::pad(detail::pct(r.old_acc()), c) +
             detail::pct(r.new_acc());
        if (r.failures() > 0) {
            s += "  (" + std::to_string(r.failures()) + " failed)";
        }
        s += '\n';
    }
    return s;
}

enum class SweepParam { lambda1, lambda2, alpha };

inline SweepParam parse_sweep_param(std::string_view name) {
    if (name == "lambda1") {
        return SweepParam::lambda1;
    }
    if (name == "lambda2") {
        return SweepParam::lambda2;
    }
    if (name == "alpha") {
        return SweepParam::alpha;
    }
    throw ConfigError("unknown sweep parameter '" + std::string(name) + "' (expected lambda1, lambda2 or alpha)");
}

inline std::string sweep_param_name(SweepParam p) {
    switch (p) {
        case SweepParam::lambda1: return "lambda1";
        case SweepParam::lambda2: return "lambda2";
        case SweepParam::alpha: return "alpha";
    }
    return "?";
}

inline TrainConfig with_param(TrainConfig cfg, SweepParam p, double v) {
    switch (p) {
        case SweepParam::lambda1: cfg.loss.lambda1 = v; break;
        case SweepParam::lambda2: cfg.loss.lambda2 = v; break;
        case SweepParam::alpha: cfg.loss.alpha = v; break;
    }
    return cfg;
}

struct SweepPoint {
    double value = 0.0;
    AblationRow runs;  // outcomes at this grid value
};

/// One row per grid value, in grid order.
inline std::vector<SweepPoint> run_sweep(SweepParam param, std::span<const double> grid, const TrainConfig& base,
                                         std::span<const WorldConfig> worlds, std::span<const std::uint64_t> seeds,
                                         const std::filesystem::path& out_root = {}) {
    if (grid.empty()) {
        throw ConfigError("sweep grid is empty");
    }
    std::vector<SweepPoint> pts;
    for (double v : grid) {
        TrainConfig cfg = with_param(base, param, v);
        cfg.validate();
        SweepPoint pt{v, {sweep_param_name(param) + "=" + detail::fmt(v), {}}};
        for (const auto& w : worlds) {
            for (std::uint64_t seed : seeds) {
                cfg.seed = seed;
                std::filesystem::path dir;
                if (!out_root.empty()) {
                    dir = out_root / (sweep_param_name(param) + "_" + detail::fmt(v)) /
                          ("world" + std::to_string(w.seed) + "_seed" + std::to_string(seed));
                }
                pt.runs.runs.push_back(train_and_score(cfg, w, dir));
            }
        }
        pts.push_back(std::move(pt));
    }
    return pts;
}

inline std::string sweep_csv(SweepParam param, std::span<const SweepPoint> pts) {
    std::string s = sweep_param_name(param) + ",all,old,new,runs,failures\n";
    for (const auto& p : pts) {
        s += detail::fmt(p.value);
        for (const Summary& m : {p.runs.all(), p.runs.old_acc(), p.runs.new_acc()}) {
            s += ',' + (m.n ? detail::fmt(m.mean) : std::string());
        }
        s += ',' + std::to_string(p.runs.runs.size()) + ',' + std::to_string(p.runs.failures()) + '\n';
    }
    return s;
}

}  // namespace rpc
