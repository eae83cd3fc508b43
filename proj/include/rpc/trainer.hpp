#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rpc/autodiff.hpp"
#include "rpc/checkpoint.hpp"
#include "rpc/dataset_io.hpp"
#include "rpc/error.hpp"
#include "rpc/eval.hpp"
#include "rpc/losses.hpp"
#include "rpc/model.hpp"
#include "rpc/random.hpp"
#include "rpc/synthdata.hpp"

namespace rpc {

/// Which objective the trainer is compiled for. `baseline` removes batch
/// selection, fusion, alignment and discovery at compile time.
enum class Objective { baseline, rpc };

struct TrainConfig {
    int epochs = 50;
    int batch_size = 32;  // B
    int mu = 4;
    double lr0 = 0.1;
    double lr_min = 1e-4;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int warmup_epochs_ova = 10;
    int align_start_epoch = -1;  // -1: at the end of the OVA warm-up
    int new_start_epoch = -1;    // -1: at the end of the OVA warm-up
    int checkpoint_every = 0;    // 0: final checkpoint only
    bool freeze_ova_after_warmup = false;
    bool fixed_rho = false;      // use loss.rho_id instead of estimating it
    std::uint64_t seed = 0;
    LossWeights loss;
    ModelConfig model;
    AugmentConfig augment;

    int align_start() const { return align_start_epoch < 0 ? warmup_epochs_ova : align_start_epoch; }
    int new_start() const { return new_start_epoch < 0 ? warmup_epochs_ova : new_start_epoch; }

    void validate() const {
        if (epochs < 0) {
            throw ConfigError("train: epochs must be >= 0");
        }
        if (batch_size < 1 || mu < 1) {
            throw ConfigError("train: batch_size and mu must be >= 1");
        }
        if (!(lr0 > lr_min && lr_min >= 0.0)) {
            throw ConfigError("train: need lr0 > lr_min >= 0");
        }
        if (!(momentum >= 0.0 && momentum < 1.0) || !(weight_decay >= 0.0)) {
            throw ConfigError("train: momentum must lie in [0, 1) and weight_decay >= 0");
        }
        if (warmup_epochs_ova < 0 || (epochs > 0 && warmup_epochs_ova >= epochs)) {
            throw ConfigError("train: need 0 <= warmup_epochs_ova < epochs");
        }
        if (checkpoint_every < 0) {
            throw ConfigError("train: checkpoint_every must be >= 0");
        }
        loss.validate();
        model.validate();
        augment.validate();
    }
};

/// lr_min + (lr0 - lr_min)(1 + cos(pi * step / total)) / 2, clamped to lr_min past the end.
inline double cosine_lr(long step, long total_steps, double lr0, double lr_min) {
    if (step < 0) {
        throw ContractError("cosine_lr: negative step");
    }
    if (total_steps <= 0) {
        return lr0;
    }
    if (step >= total_steps) {
        return lr_min;
    }
    const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Fraction of samples whose ID score exceeds 0.5.
inline double estimate_rho_id(std::span<const double> w_old) {
    if (w_old.empty()) {
        throw ContractError("estimate_rho_id: empty pool");
    }
    std::size_t id = 0;
    for (double w : w_old) {
        id += w > 0.5;
    }
    return static_cast<double>(id) / static_cast<double>(w_old.size());
}

inline double estimate_rho_id(const ModelParams& params, const Tensor& unlabeled) {
    return estimate_rho_id(ova_weights(params, unlabeled).w_old);
}

struct StepLosses {
    double rep_unsup = 0.0;
    double rep_sup = 0.0;
    double cls = 0.0;
    double ova = 0.0;
    double align = 0.0;
    double discover = 0.0;
    double total = 0.0;      // total objective without the OVA term
    double objective = 0.0;  // total + ova, the value actually minimized
    std::size_t mu_id = 0;
    bool align_skipped = false;

    friend bool operator==(const StepLosses&, const StepLosses&) = default;
};

struct EpochMetrics {
    int epoch = 0;
    double lr = 0.0;
    double rep_unsup = 0.0, rep_sup = 0.0, cls = 0.0, ova = 0.0, align = 0.0, discover = 0.0, total = 0.0;
    double rho_id = 0.0;
    std::optional<double> all, old_acc, new_acc;

    friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

struct RunMetrics {
    std::vector<EpochMetrics> epochs;
    std::vector<StepLosses> steps;  // steps run by this process (not restored on resume)

    const EpochMetrics* final_epoch() const { return epochs.empty() ? nullptr : &epochs.back(); }

    const EpochMetrics* best_epoch() const {
        const EpochMetrics* best = nullptr;
        for (const auto& e : epochs) {
            if (e.all && (!best || *e.all > *best->all)) {
                best = &e;
            }
        }
        return best;
    }
};

struct TrainState {
    ModelParams params;
    std::vector<Tensor> momentum;  // same order as params.trainable()
    int epoch = 0;                 // epochs completed
    double rho_id = 0.0;
    RunMetrics metrics;
};

inline void check_compatible(const TrainConfig& cfg, const GcdSplit& split) {
    const auto& m = cfg.model;
    if (split.dim() != static_cast<std::size_t>(m.input_dim)) {
        throw DimensionError("dataset dim " + std::to_string(split.dim()) + " does not match model input_dim " +
                             std::to_string(m.input_dim));
    }
    if (split.num_classes != m.num_classes || split.num_known != m.num_known) {
        throw DimensionError("dataset class counts (K=" + std::to_string(split.num_classes) +
                             ", C_L=" + std::to_string(split.num_known) + ") do not match the model");
    }
    if (split.labeled.rows() == 0 || split.unlabeled.rows() == 0) {
        throw ContractError("training needs both labeled and unlabeled samples");
    }
}

inline TrainState init_state(const TrainConfig& cfg, const GcdSplit& split) {
    check_compatible(cfg, split);
    Rng rng = make_rng(cfg.seed, "model-init");
    TrainState s;
    s.params = init_params(cfg.model, rng);
    for (const auto& [name, t] : s.params.trainable()) {
        s.momentum.emplace_back(t->rows(), t->cols());
    }
    if (cfg.model.known_prototypes == KnownPrototypeSource::feature_mean) {
        s.params.known_means = class_feature_means(s.params, split.labeled, split.labels);
    }
    return s;
}

/// Effective (B, mu) for a split: B never exceeds the labeled pool and B*mu
/// never exceeds the unlabeled pool.
inline std::pair<std::size_t, std::size_t> effective_batch(const TrainConfig& cfg, const GcdSplit& split) {
    const std::size_t b = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), split.labeled.rows());
    const std::size_t mu = std::min<std::size_t>(static_cast<std::size_t>(cfg.mu), split.unlabeled.rows() / b);
    if (mu == 0) {
        throw ContractError("unlabeled pool smaller than one labeled batch");
    }
    return {b, mu};
}

inline long steps_per_epoch(const TrainConfig& cfg, const GcdSplit& split) {
    const auto b = effective_batch(cfg, split).first;
    return static_cast<long>((split.labeled.rows() + b - 1) / b);
}

/// The per-step graph the trainer differentiates.
struct StepGraph {
    LossTerms terms;
    Var ova;
    Var total;      // baseline (+ align + new)
    Var objective;  // total + ova
    Var h_weak;     // encoder features of the weak view
    bool align_skipped = false;
};

/// Builds every loss term of one step on the tape of `bp`. Rows of the views
/// are the step rows of `fb` (B labeled rows first, then the B*mu sampled
/// unlabeled rows); `unlabeled_w_old` holds the OVA score of each sampled
/// unlabeled row. With O = baseline the RPC terms are not compiled in.
template <Objective O>
StepGraph step_objective(const BoundParams& bp, const Var& x_weak, const Var& x_strong, std::span<const int> lab_labels,
                         const FusedBatch& fb, std::span<const double> unlabeled_w_old, const LossWeights& lw,
                         bool align_on, bool new_on) {
    const std::size_t b = fb.labeled.size();
    const std::size_t n = fb.step_rows();
    if (x_weak.rows() != n || x_strong.rows() != n || lab_labels.size() != b || unlabeled_w_old.size() != n - b) {
        throw DimensionError("step_objective: batch layout mismatch");
    }
    std::vector<int> labels(n, -1);
    std::copy(lab_labels.begin(), lab_labels.end(), labels.begin());

    Var h_weak = encode(bp, x_weak);
    Var h_strong = encode(bp, x_strong);
    Var z_weak = project(bp, h_weak);
    Var z_strong = project(bp, h_strong);

    // Student view: strong augmentation; teacher view: weak augmentation.
    Var zn_hat = l2_normalize_rows(z_strong);
    Var zn_tilde = l2_normalize_rows(z_weak);

    std::vector<std::size_t> lab_rows(b);
    std::iota(lab_rows.begin(), lab_rows.end(), 0);

    StepGraph g;
    g.h_weak = h_weak;
    LossTerms& terms = g.terms;
    terms.rep_unsup = unsup_contrastive(zn_hat, zn_tilde, lw.tau_u);
    bool has_pair = false;
    for (std::size_t i = 0; i < b && !has_pair; ++i) {
        for (std::size_t j = i + 1; j < b; ++j) {
            if (lab_labels[i] == lab_labels[j]) {
                has_pair = true;
                break;
            }
        }
    }
    if (has_pair) {
        terms.rep_sup = sup_contrastive(gather_rows(zn_hat, lab_rows), gather_rows(zn_tilde, lab_rows), lab_labels,
                                        lw.tau_s);
    }
    Var p_hat = soft_label(bp, h_strong, lw.tau_s);
    Var p_tilde = soft_label(bp, h_weak, lw.tau_s);
    terms.cls = classifier_losses(p_hat, p_tilde, labels, bp.config->num_known, lw.lambda, lw.epsilon);
    g.ova = ova_bce_loss(bp, gather_rows(z_weak, lab_rows), lab_labels);

    if constexpr (O == Objective::rpc) {
        if (align_on) {
            if (fb.mu_id > 0) {
                // Fusion and deltas live on the unit sphere of the contrastive space.
                Var zw = gather_rows(zn_tilde, fb.order);
                Var zs = gather_rows(zn_hat, fb.order);
                const Tensor a = fusion_matrix(fb.w_old_per_row, fb.alpha);
                Var delta = behavioral_delta(zw, zs, fb.labeled_row, a, true);
                terms.align = align_loss(delta, fb.labeled_row, fb.w_old_per_row).loss;
            }
            g.align_skipped = !terms.align.has_value();
        }
        if (new_on) {
            std::vector<std::size_t> unl_rows(n - b);
            std::vector<double> w_new(n - b);
            for (std::size_t j = 0; j < unl_rows.size(); ++j) {
                unl_rows[j] = b + j;
                w_new[j] = 1.0 - unlabeled_w_old[j];
            }
            Var feats = gather_rows(h_weak, unl_rows);
            Var d = discovery_loss(bp, feats, w_new, lw.tau_u, lw.discover_detach_similarity,
                                   lw.discover_detach_prototypes);
            if (lw.normalize_discover) {
                // Read through detach() so the constant stays pinned under gradcheck replay.
                const double mass = discovery_pair_mass(detach(feats).value(), w_new, lw.tau_u);
                d = scale(d, mass > 0.0 ? 1.0 / mass : 0.0);
            }
            terms.discover = d;
        }
    } else {
        (void)align_on;
        (void)new_on;
        (void)unlabeled_w_old;
    }

    g.total = total_loss(terms, lw);
    require_finite_component(std::optional<Var>(g.ova), "ova");
    g.objective = g.total + g.ova;
    return g;
}

namespace detail {

struct PoolScores {
    std::vector<double> w_old;
    double rho_id = 0.0;
};

template <Objective O>
StepLosses train_step(TrainState& s, const GcdSplit& split, const TrainConfig& cfg, const PoolScores& pool,
                      int epoch, double lr, Rng& rng) {
    const auto [b, mu] = effective_batch(cfg, split);
    const auto& lw = cfg.loss;
    const bool align_on = O == Objective::rpc && epoch >= cfg.align_start();
    const bool new_on = O == Objective::rpc && epoch >= cfg.new_start();

    const FusedBatch fb = build_batch(split.labeled.rows(), pool.w_old, b, mu, align_on ? pool.rho_id : 0.0,
                                      lw.alpha, split.dim(), cfg.augment, rng);

    const std::size_t n = fb.step_rows();
    Tensor x(n, split.dim());
    std::vector<int> lab_labels(b);
    std::vector<double> unl_w_old(n - b);
    for (std::size_t i = 0; i < b; ++i) {
        auto src = split.labeled.row_span(fb.labeled[i]);
        std::copy(src.begin(), src.end(), x.row_span(i).begin());
        lab_labels[i] = split.labels[fb.labeled[i]];
    }
    for (std::size_t j = 0; j < fb.unlabeled.size(); ++j) {
        auto src = split.unlabeled.row_span(fb.unlabeled[j]);
        std::copy(src.begin(), src.end(), x.row_span(b + j).begin());
        unl_w_old[j] = pool.w_old[fb.unlabeled[j]];
    }

    Tape tape;
    const BoundParams bp = bind(tape, s.params, true);
    Var x_weak = tape.constant(fb.weak.apply_rows(x));
    const StepGraph g = step_objective<O>(bp, x_weak, tape.constant(fb.strong.apply_rows(x)), lab_labels, fb,
                                          unl_w_old, lw, align_on, new_on);
    const LossTerms& terms = g.terms;
    const Var& total = g.total;
    const Var& objective = g.objective;

    StepLosses out;
    out.mu_id = fb.mu_id;
    out.align_skipped = g.align_skipped;
    out.rep_unsup = terms.rep_unsup.item();
    out.rep_sup = terms.rep_sup ? terms.rep_sup->item() : 0.0;
    out.cls = terms.cls.item();
    out.ova = g.ova.item();
    out.align = terms.align ? terms.align->item() : 0.0;
    out.discover = terms.discover ? terms.discover->item() : 0.0;
    out.total = total.item();
    out.objective = objective.item();

    tape.backward(objective);
    const auto vars = bp.trainable();
    auto params = s.params.trainable();
    std::vector<Tensor> grads;
    grads.reserve(vars.size());
    for (std::size_t k = 0; k < vars.size(); ++k) {
        grads.push_back(tape.grad(vars[k]));
        require_finite(grads.back(), "gradient of " + params[k].first);
    }
    const bool freeze_ova = cfg.freeze_ova_after_warmup && epoch >= cfg.warmup_epochs_ova;
    for (std::size_t k = 0; k < vars.size(); ++k) {
        if (freeze_ova && params[k].first == "ova_heads") {
            continue;
        }
        Tensor& p = *params[k].second;
        Tensor& buf = s.momentum[k];
        const Tensor& grad = grads[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            buf[i] = cfg.momentum * buf[i] + grad[i] + cfg.weight_decay * p[i];
            p[i] -= lr * buf[i];
        }
    }

    if (cfg.model.known_prototypes == KnownPrototypeSource::feature_mean) {
        const Tensor& h = g.h_weak.value();
        const double m = cfg.model.feature_mean_momentum;
        const auto known = static_cast<std::size_t>(cfg.model.num_known);
        Tensor batch_mean(known, h.cols());
        std::vector<double> count(known, 0.0);
        for (std::size_t i = 0; i < b; ++i) {
            const auto c = static_cast<std::size_t>(lab_labels[i]);
            for (std::size_t j = 0; j < h.cols(); ++j) {
                batch_mean(c, j) += h(i, j);
            }
            count[c] += 1.0;
        }
        for (std::size_t c = 0; c < known; ++c) {
            if (count[c] == 0.0) {
                continue;
            }
            for (std::size_t j = 0; j < h.cols(); ++j) {
                s.params.known_means(c, j) = m * s.params.known_means(c, j) + (1.0 - m) * batch_mean(c, j) / count[c];
            }
        }
    }
    return out;
}

}  // namespace detail

/// Runs one epoch: per-epoch OVA scoring of the unlabeled pool (rho_id and
/// batch selection weights), then ceil(n_l / B) SGD steps, then evaluation.
template <Objective O = Objective::rpc>
EpochMetrics train_epoch(TrainState& s, const GcdSplit& split, const TrainConfig& cfg, const Evaluator* eval = nullptr) {
    const int e = s.epoch;
    const long spe = steps_per_epoch(cfg, split);
    const long total_steps = spe * cfg.epochs;
    Rng rng = make_rng(cfg.seed, "epoch", static_cast<std::uint64_t>(e));

    detail::PoolScores pool;
    if constexpr (O == Objective::rpc) {
        pool.w_old = ova_weights(s.params, split.unlabeled).w_old;
        pool.rho_id = cfg.fixed_rho ? cfg.loss.rho_id : estimate_rho_id(pool.w_old);
    } else {
        pool.w_old.assign(split.unlabeled.rows(), 0.0);
    }
    s.rho_id = pool.rho_id;

    EpochMetrics m;
    m.epoch = e;
    m.rho_id = pool.rho_id;
    for (long k = 0; k < spe; ++k) {
        const long step = static_cast<long>(e) * spe + k;
        const double lr = cosine_lr(step, total_steps - 1, cfg.lr0, cfg.lr_min);
        if (k == 0) {
            m.lr = lr;
        }
        const StepLosses l = detail::train_step<O>(s, split, cfg, pool, e, lr, rng);
        m.rep_unsup += l.rep_unsup;
        m.rep_sup += l.rep_sup;
        m.cls += l.cls;
        m.ova += l.ova;
        m.align += l.align;
        m.discover += l.discover;
        m.total += l.total;
        s.metrics.steps.push_back(l);
    }
    const double inv = 1.0 / static_cast<double>(spe);
    for (double* v : {&m.rep_unsup, &m.rep_sup, &m.cls, &m.ova, &m.align, &m.discover, &m.total}) {
        *v *= inv;
    }
    if (eval && *eval) {
        const GcdAccuracy acc = (*eval)(predict_clusters(s.params, split.unlabeled));
        m.all = acc.all;
        m.old_acc = acc.old_acc;
        m.new_acc = acc.new_acc;
    }
    ++s.epoch;
    s.metrics.epochs.push_back(m);
    return m;
}

// ---------------------------------------------------------------------------
// Metrics files and checkpoints
// ---------------------------------------------------------------------------

inline constexpr std::string_view kMetricsHeader =
    "epoch,lr,rep_unsup,rep_sup,cls,ova,align,discover,total,rho_id,all,old,new";

inline std::string metrics_csv_row(const EpochMetrics& m) {
    std::string s = std::to_string(m.epoch);
    for (double v : {m.lr, m.rep_unsup, m.rep_sup, m.cls, m.ova, m.align, m.discover, m.total, m.rho_id}) {
        s += ',';
        io_detail::append_double(s, v);
    }
    for (const auto& v : {m.all, m.old_acc, m.new_acc}) {
        s += ',';
        if (v) {
            io_detail::append_double(s, *v);
        }
    }
    return s;
}

inline EpochMetrics parse_metrics_csv_row(std::string_view line) {
    const auto cells = io_detail::split_commas(line);
    if (cells.size() != 13) {
        throw ParseError("metrics row has " + std::to_string(cells.size()) + " columns, expected 13");
    }
    io_detail::LineReader r(line, "metrics row");
    EpochMetrics m;
    m.epoch = io_detail::parse_number<int>(cells[0], r, "epoch");
    double* fields[] = {&m.lr, &m.rep_unsup, &m.rep_sup, &m.cls, &m.ova, &m.align, &m.discover, &m.total, &m.rho_id};
    for (std::size_t i = 0; i < 9; ++i) {
        *fields[i] = io_detail::parse_number<double>(cells[i + 1], r, "value");
    }
    std::optional<double>* opt[] = {&m.all, &m.old_acc, &m.new_acc};
    for (std::size_t i = 0; i < 3; ++i) {
        if (!cells[10 + i].empty()) {
            *opt[i] = io_detail::parse_number<double>(cells[10 + i], r, "accuracy");
        }
    }
    return m;
}

inline std::string metrics_csv(const RunMetrics& rm) {
    std::string s(kMetricsHeader);
    s += '\n';
    for (const auto& e : rm.epochs) {
        s += metrics_csv_row(e);
        s += '\n';
    }
    return s;
}

inline Checkpoint state_checkpoint(const TrainState& s) {
    Checkpoint c;
    write_model(c, s.params);
    const auto names = s.params.trainable();
    for (std::size_t k = 0; k < names.size(); ++k) {
        c.tensors.emplace_back("momentum/" + names[k].first, s.momentum[k]);
    }
    c.meta["train.epoch"] = std::to_string(s.epoch);
    std::string rho;
    io_detail::append_double(rho, s.rho_id);
    c.meta["train.rho_id"] = rho;
    c.meta["metrics.count"] = std::to_string(s.metrics.epochs.size());
    for (std::size_t i = 0; i < s.metrics.epochs.size(); ++i) {
        c.meta["metrics." + std::to_string(i)] = metrics_csv_row(s.metrics.epochs[i]);
    }
    return c;
}

inline TrainState state_from_checkpoint(const Checkpoint& c) {
    TrainState s;
    s.params = read_model(c);
    for (const auto& [name, t] : s.params.trainable()) {
        s.momentum.push_back(c.tensor("momentum/" + name));
    }
    s.epoch = std::stoi(c.meta_value("train.epoch"));
    s.rho_id = std::stod(c.meta_value("train.rho_id"));
    const int n = std::stoi(c.meta_value("metrics.count"));
    for (int i = 0; i < n; ++i) {
        s.metrics.epochs.push_back(parse_metrics_csv_row(c.meta_value("metrics." + std::to_string(i))));
    }
    return s;
}

inline nlohmann::json epoch_json(const EpochMetrics& m) {
    nlohmann::json j;
    j["epoch"] = m.epoch;
    j["lr"] = m.lr;
    j["rho_id"] = m.rho_id;
    j["losses"] = {{"rep_unsup", m.rep_unsup}, {"rep_sup", m.rep_sup}, {"cls", m.cls}, {"ova", m.ova},
                   {"align", m.align},         {"discover", m.discover}, {"total", m.total}};
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    j["all"] = opt(m.all);
    j["old"] = opt(m.old_acc);
    j["new"] = opt(m.new_acc);
    return j;
}

/// Run summary; wall time is kept out so identical runs give identical bytes.
inline nlohmann::json summary_json(const RunMetrics& rm, const nlohmann::json& config_echo) {
    nlohmann::json j;
    j["config"] = config_echo;
    j["epochs_run"] = rm.epochs.size();
    j["final"] = rm.final_epoch() ? epoch_json(*rm.final_epoch()) : nlohmann::json(nullptr);
    j["best"] = rm.best_epoch() ? epoch_json(*rm.best_epoch()) : nlohmann::json(nullptr);
    return j;
}

struct RunOptions {
    std::filesystem::path output_dir;                  // empty: write nothing
    std::optional<std::filesystem::path> resume_from;  // state checkpoint
    std::optional<int> stop_after_epoch;               // stop once this many epochs are done
    nlohmann::json config_echo = nlohmann::json::object();
    std::function<void(const EpochMetrics&)> on_epoch;  // progress hook
};

struct RunResult {
    ModelParams params;
    RunMetrics metrics;
    double wall_seconds = 0.0;
    bool completed = false;
};

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int epoch) {
    char name[32];
    std::snprintf(name, sizeof name, "ckpt_epoch_%04d.ckpt", epoch);
    return dir / name;
}

/// Full training run. Checkpoints every cfg.checkpoint_every epochs and at the
/// end; writes metrics.csv, summary.json and timing.json when an output
/// directory is given. A non-finite step saves last_good.ckpt and rethrows.
template <Objective O = Objective::rpc>
RunResult run_training(const TrainConfig& cfg, const GcdSplit& split, const Evaluator& eval = {},
                       const RunOptions& opt = {}) {
    cfg.validate();
    check_compatible(cfg, split);
    const auto t0 = std::chrono::steady_clock::now();
    const bool write = !opt.output_dir.empty();
    if (write) {
        std::error_code ec;
        std::filesystem::create_directories(opt.output_dir, ec);
        if (ec) {
            throw IoError("cannot create output directory " + opt.output_dir.string() + ": " + ec.message());
        }
    }

    TrainState s = opt.resume_from ? state_from_checkpoint(load_checkpoint(*opt.resume_from)) : init_state(cfg, split);
    RunResult res;
    while (s.epoch < cfg.epochs) {
        if (opt.stop_after_epoch && s.epoch >= *opt.stop_after_epoch) {
            break;
        }
        if (!s.params.all_finite()) {
            throw NumericalError("parameters are not finite at epoch " + std::to_string(s.epoch));
        }
        const TrainState last_good_params_only{s.params, s.momentum, s.epoch, s.rho_id, {}};
        try {
            const EpochMetrics m = train_epoch<O>(s, split, cfg, &eval);
            if (opt.on_epoch) {
                opt.on_epoch(m);
            }
        } catch (const NumericalError&) {
            if (write) {
                save_checkpoint(state_checkpoint(last_good_params_only), opt.output_dir / "last_good.ckpt");
            }
            throw;
        }
        if (write && cfg.checkpoint_every > 0 && s.epoch % cfg.checkpoint_every == 0) {
            save_checkpoint(state_checkpoint(s), checkpoint_path(opt.output_dir, s.epoch));
        }
    }
    res.completed = s.epoch >= cfg.epochs;
    res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (write) {
        save_checkpoint(state_checkpoint(s), opt.output_dir / (res.completed ? "final.ckpt" : "interrupted.ckpt"));
        io_detail::write_file(opt.output_dir / "metrics.csv", metrics_csv(s.metrics));
        io_detail::write_file(opt.output_dir / "summary.json", summary_json(s.metrics, opt.config_echo).dump(2) + "\n");
        nlohmann::json timing = {{"wall_seconds", res.wall_seconds}};
        io_detail::write_file(opt.output_dir / "timing.json", timing.dump(2) + "\n");
    }
    res.params = std::move(s.params);
    res.metrics = std::move(s.metrics);
    return res;
}

}  // namespace rpc
