#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rpc/autodiff.hpp"
#include "rpc/checkpoint.hpp"
#include "rpc/error.hpp"
#include "rpc/random.hpp"
#include "rpc/tensor.hpp"

namespace rpc {

/// Where the known-class reference frame of the relational signature comes from.
enum class KnownPrototypeSource {
    classifier,    // first C_L rows of the classifier prototypes
    feature_mean,  // per-class running mean of labeled features
};

struct ModelConfig {
    int input_dim = 32;
    int hidden_dim = 64;
    int feature_dim = 32;
    int proj_hidden_dim = 64;
    int proj_dim = 32;
    int num_classes = 10;  // K
    int num_known = 5;     // C_L
    KnownPrototypeSource known_prototypes = KnownPrototypeSource::feature_mean;
    double feature_mean_momentum = 0.9;

    void validate() const {
        if (input_dim < 1 || hidden_dim < 1 || feature_dim < 1 || proj_hidden_dim < 1 || proj_dim < 1) {
            throw ConfigError("model: all dimensions must be positive");
        }
        if (num_known < 1 || num_known >= num_classes) {
            throw ConfigError("model: need 1 <= num_known < num_classes");
        }
        if (!(feature_mean_momentum >= 0.0 && feature_mean_momentum < 1.0)) {
            throw ConfigError("model: feature_mean_momentum must lie in [0, 1)");
        }
    }
};

/// All trainable state plus the non-trainable known-class feature means.
///   encoder   f(x) = tanh(x W1 + b1) W2 + b2
///   projector g(h) = h S + tanh(h V1 + c1) V2 + c2
///   prototypes K × d, OVA heads C_L × (p + 1) with the bias in the last column.
struct ModelParams {
    ModelConfig config;
    Tensor enc_w1, enc_b1, enc_w2, enc_b2;
    Tensor proj_skip, proj_w1, proj_b1, proj_w2, proj_b2;
    Tensor prototypes;
    Tensor ova_heads;
    Tensor known_means;

    std::vector<std::pair<std::string, Tensor*>> trainable() {
        return {{"enc_w1", &enc_w1},       {"enc_b1", &enc_b1},   {"enc_w2", &enc_w2},
                {"enc_b2", &enc_b2},       {"proj_skip", &proj_skip}, {"proj_w1", &proj_w1},
                {"proj_b1", &proj_b1},     {"proj_w2", &proj_w2}, {"proj_b2", &proj_b2},
                {"prototypes", &prototypes}, {"ova_heads", &ova_heads}};
    }

    std::vector<std::pair<std::string, const Tensor*>> trainable() const {
        auto v = const_cast<ModelParams*>(this)->trainable();
        std::vector<std::pair<std::string, const Tensor*>> out;
        for (auto& [n, t] : v) {
            out.emplace_back(n, t);
        }
        return out;
    }

    bool all_finite() const {
        for (const auto& [n, t] : trainable()) {
            if (!t->all_finite()) {
                return false;
            }
        }
        return known_means.all_finite();
    }

    friend bool operator==(const ModelParams& a, const ModelParams& b) {
        const auto ta = a.trainable();
        const auto tb = b.trainable();
        for (std::size_t i = 0; i < ta.size(); ++i) {
            if (!(*ta[i].second == *tb[i].second)) {
                return false;
            }
        }
        return a.known_means == b.known_means;
    }
};

inline ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    std::normal_distribution<double> normal(0.0, 1.0);
    auto randn = [&](int r, int c, double std) {
        Tensor t(r, c);
        for (double& v : t.data()) {
            v = std * normal(rng);
        }
        return t;
    };
    const double d = cfg.feature_dim;
    ModelParams p;
    p.config = cfg;
    p.enc_w1 = randn(cfg.input_dim, cfg.hidden_dim, 1.0 / std::sqrt(cfg.input_dim));
    p.enc_b1 = Tensor(1, cfg.hidden_dim);
    p.enc_w2 = randn(cfg.hidden_dim, cfg.feature_dim, 1.0 / std::sqrt(cfg.hidden_dim));
    p.enc_b2 = Tensor(1, cfg.feature_dim);
    p.proj_skip = cfg.proj_dim == cfg.feature_dim ? Tensor::identity(cfg.feature_dim)
                                                  : randn(cfg.feature_dim, cfg.proj_dim, 1.0 / std::sqrt(d));
    p.proj_w1 = randn(cfg.feature_dim, cfg.proj_hidden_dim, 1.0 / std::sqrt(d));
    p.proj_b1 = Tensor(1, cfg.proj_hidden_dim);
    p.proj_w2 = randn(cfg.proj_hidden_dim, cfg.proj_dim, 0.02);
    p.proj_b2 = Tensor(1, cfg.proj_dim);
    p.prototypes = kernels::l2_normalize_rows(randn(cfg.num_classes, cfg.feature_dim, 1.0), 1e-12);
    p.ova_heads = Tensor(cfg.num_known, cfg.proj_dim + 1);
    p.known_means = Tensor(cfg.num_known, cfg.feature_dim);
    return p;
}

/// Projector reset to the identity map (requires proj_dim == feature_dim).
inline void set_identity_projector(ModelParams& p) {
    if (p.config.proj_dim != p.config.feature_dim) {
        throw DimensionError("identity projector needs proj_dim == feature_dim");
    }
    p.proj_skip = Tensor::identity(p.config.feature_dim);
    p.proj_w2 = Tensor(p.config.proj_hidden_dim, p.config.proj_dim);
    p.proj_b2 = Tensor(1, p.config.proj_dim);
}

// ---------------------------------------------------------------------------
// Forward passes on a tape
// ---------------------------------------------------------------------------

/// ModelParams placed on a tape, as variables or constants.
struct BoundParams {
    const ModelConfig* config = nullptr;
    Var enc_w1, enc_b1, enc_w2, enc_b2;
    Var proj_skip, proj_w1, proj_b1, proj_w2, proj_b2;
    Var prototypes, ova_heads, known_means;

    /// Same order as ModelParams::trainable().
    std::vector<Var> trainable() const {
        return {enc_w1,  enc_b1,  enc_w2,  enc_b2,     proj_skip, proj_w1,
                proj_b1, proj_w2, proj_b2, prototypes, ova_heads};
    }
};

inline BoundParams bind(Tape& tape, const ModelParams& p, bool requires_grad = true) {
    auto put = [&](const Tensor& t) { return requires_grad ? tape.variable(t) : tape.constant(t); };
    BoundParams b;
    b.config = &p.config;
    b.enc_w1 = put(p.enc_w1);
    b.enc_b1 = put(p.enc_b1);
    b.enc_w2 = put(p.enc_w2);
    b.enc_b2 = put(p.enc_b2);
    b.proj_skip = put(p.proj_skip);
    b.proj_w1 = put(p.proj_w1);
    b.proj_b1 = put(p.proj_b1);
    b.proj_w2 = put(p.proj_w2);
    b.proj_b2 = put(p.proj_b2);
    b.prototypes = put(p.prototypes);
    b.ova_heads = put(p.ova_heads);
    b.known_means = tape.constant(p.known_means);
    return b;
}

/// Binds already-created variables (in trainable() order) as model parameters.
inline BoundParams bind_vars(const ModelParams& p, std::span<const Var> trainable, const Var& known_means) {
    if (trainable.size() != 11) {
        throw DimensionError("bind_vars: expected 11 parameter tensors");
    }
    BoundParams b;
    b.config = &p.config;
    b.enc_w1 = trainable[0];
    b.enc_b1 = trainable[1];
    b.enc_w2 = trainable[2];
    b.enc_b2 = trainable[3];
    b.proj_skip = trainable[4];
    b.proj_w1 = trainable[5];
    b.proj_b1 = trainable[6];
    b.proj_w2 = trainable[7];
    b.proj_b2 = trainable[8];
    b.prototypes = trainable[9];
    b.ova_heads = trainable[10];
    b.known_means = known_means;
    return b;
}

/// h = f(x)
inline Var encode(const BoundParams& p, const Var& x) {
    if (x.cols() != static_cast<std::size_t>(p.config->input_dim)) {
        throw DimensionError("encode: input dim " + std::to_string(x.cols()) + ", model expects " +
                             std::to_string(p.config->input_dim));
    }
    Var hidden = tanh(add_row(matmul(x, p.enc_w1), p.enc_b1));
    return add_row(matmul(hidden, p.enc_w2), p.enc_b2);
}

/// z = g(h)
inline Var project(const BoundParams& p, const Var& h) {
    if (h.cols() != static_cast<std::size_t>(p.config->feature_dim)) {
        throw DimensionError("project: feature dim mismatch");
    }
    Var hidden = tanh(add_row(matmul(h, p.proj_w1), p.proj_b1));
    return add_row(matmul(h, p.proj_skip) + matmul(hidden, p.proj_w2), p.proj_b2);
}

/// Cosine similarity between every row of a and every row of b.
inline Var cosine_matrix(const Var& a, const Var& b, double eps = 1e-12) {
    return matmul_nt(l2_normalize_rows(a, eps), l2_normalize_rows(b, eps));
}

/// Softmax over cosine similarities to the K prototypes.
inline Var soft_label(const BoundParams& p, const Var& h, double tau_s) {
    require_positive_temperature(tau_s, "soft_label");
    return softmax_rows(cosine_matrix(h, p.prototypes), tau_s);
}

/// n × C_L logits of the one-vs-all heads on L2-normalized projections.
inline Var ova_logits(const BoundParams& p, const Var& z) {
    if (z.cols() + 1 != p.ova_heads.cols()) {
        throw DimensionError("ova_logits: projection dim mismatch");
    }
    return matmul_nt(append_ones_col(l2_normalize_rows(z)), p.ova_heads);
}

inline Var known_prototypes(const BoundParams& p) {
    if (p.config->known_prototypes == KnownPrototypeSource::feature_mean) {
        return p.known_means;
    }
    std::vector<std::size_t> rows(static_cast<std::size_t>(p.config->num_known));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i] = i;
    }
    return gather_rows(p.prototypes, std::move(rows));
}

/// r(x): cosine of each feature row to each known-class prototype, n × C_L.
inline Var relational_signature(const BoundParams& p, const Var& h) {
    return cosine_matrix(h, known_prototypes(p));
}

/// Binary cross-entropy summed over heads, averaged over labeled samples;
/// target 1 for the sample's own class and 0 for the rest.
inline Var ova_bce_loss(const BoundParams& p, const Var& z, std::span<const int> labels) {
    if (labels.empty() || z.rows() == 0) {
        throw ContractError("ova_bce_loss: empty batch");
    }
    if (labels.size() != z.rows()) {
        throw DimensionError("ova_bce_loss: label count differs from row count");
    }
    const auto known = static_cast<std::size_t>(p.config->num_known);
    Tensor target(labels.size(), known);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= known) {
            throw ContractError("ova_bce_loss: label " + std::to_string(labels[i]) + " is not a known class");
        }
        target(i, static_cast<std::size_t>(labels[i])) = 1.0;
    }
    Var logits = ova_logits(p, z);
    Var t = z.tape().constant(std::move(target));
    return scale(sum(softplus(logits) - t * logits), 1.0 / static_cast<double>(labels.size()));
}

// ---------------------------------------------------------------------------
// Gradient-free conveniences
// ---------------------------------------------------------------------------

inline Tensor encode(const ModelParams& params, const Tensor& x) {
    Tape tape;
    return encode(bind(tape, params, false), tape.constant(x)).value();
}

inline Tensor project(const ModelParams& params, const Tensor& h) {
    Tape tape;
    return project(bind(tape, params, false), tape.constant(h)).value();
}

inline Tensor soft_label(const ModelParams& params, const Tensor& h, double tau_s) {
    Tape tape;
    return soft_label(bind(tape, params, false), tape.constant(h), tau_s).value();
}

inline Tensor relational_signature(const ModelParams& params, const Tensor& h) {
    Tape tape;
    return relational_signature(bind(tape, params, false), tape.constant(h)).value();
}

struct OvaWeights {
    std::vector<double> w_old;  // s_ID
    std::vector<double> w_new;  // 1 - s_ID
};

/// s_ID(g(f(x))) = max over heads of sigmoid(logit).
inline OvaWeights ova_weights(const ModelParams& params, const Tensor& x) {
    Tape tape;
    auto b = bind(tape, params, false);
    const Tensor logits = ova_logits(b, project(b, encode(b, tape.constant(x)))).value();
    OvaWeights w;
    w.w_old.resize(logits.rows());
    w.w_new.resize(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        double s = 0.0;
        for (double l : logits.row_span(i)) {
            s = std::max(s, kernels::sigmoid(l));
        }
        w.w_old[i] = s;
        w.w_new[i] = 1.0 - s;
    }
    return w;
}

/// Cluster id per row: argmax over prototypes of the cosine similarity
/// (the soft-label argmax, which does not depend on temperature).
inline std::vector<int> predict_clusters(const ModelParams& params, const Tensor& x) {
    Tape tape;
    auto b = bind(tape, params, false);
    const Tensor cos = cosine_matrix(encode(b, tape.constant(x)), b.prototypes).value();
    std::vector<int> out(cos.rows());
    for (std::size_t i = 0; i < cos.rows(); ++i) {
        auto r = cos.row_span(i);
        out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    }
    return out;
}

/// Per-class mean of labeled features, used to seed the feature-mean frame.
inline Tensor class_feature_means(const ModelParams& params, const Tensor& x, std::span<const int> labels) {
    const Tensor h = encode(params, x);
    const auto known = static_cast<std::size_t>(params.config.num_known);
    Tensor m(known, h.cols());
    std::vector<double> count(known, 0.0);
    for (std::size_t i = 0; i < h.rows(); ++i) {
        const auto c = static_cast<std::size_t>(labels[i]);
        for (std::size_t j = 0; j < h.cols(); ++j) {
            m(c, j) += h(i, j);
        }
        count[c] += 1.0;
    }
    for (std::size_t c = 0; c < known; ++c) {
        if (count[c] > 0) {
            for (double& v : m.row_span(c)) {
                v /= count[c];
            }
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoint conversion
// ---------------------------------------------------------------------------

inline void write_model(Checkpoint& c, const ModelParams& p) {
    const auto& m = p.config;
    c.meta["model.input_dim"] = std::to_string(m.input_dim);
    c.meta["model.hidden_dim"] = std::to_string(m.hidden_dim);
    c.meta["model.feature_dim"] = std::to_string(m.feature_dim);
    c.meta["model.proj_hidden_dim"] = std::to_string(m.proj_hidden_dim);
    c.meta["model.proj_dim"] = std::to_string(m.proj_dim);
    c.meta["model.num_classes"] = std::to_string(m.num_classes);
    c.meta["model.num_known"] = std::to_string(m.num_known);
    c.meta["model.known_prototypes"] =
        m.known_prototypes == KnownPrototypeSource::classifier ? "classifier" : "feature_mean";
    {
        std::string s;
        io_detail::append_double(s, m.feature_mean_momentum);
        c.meta["model.feature_mean_momentum"] = s;
    }
    for (const auto& [name, t] : p.trainable()) {
        c.tensors.emplace_back("param/" + name, *t);
    }
    c.tensors.emplace_back("state/known_means", p.known_means);
}

inline ModelParams read_model(const Checkpoint& c) {
    ModelParams p;
    auto& m = p.config;
    auto geti = [&](const char* k) { return std::stoi(c.meta_value(k)); };
    m.input_dim = geti("model.input_dim");
    m.hidden_dim = geti("model.hidden_dim");
    m.feature_dim = geti("model.feature_dim");
    m.proj_hidden_dim = geti("model.proj_hidden_dim");
    m.proj_dim = geti("model.proj_dim");
    m.num_classes = geti("model.num_classes");
    m.num_known = geti("model.num_known");
    m.known_prototypes = c.meta_value("model.known_prototypes") == "feature_mean"
                             ? KnownPrototypeSource::feature_mean
                             : KnownPrototypeSource::classifier;
    m.feature_mean_momentum = std::stod(c.meta_value("model.feature_mean_momentum"));
    for (auto& [name, t] : p.trainable()) {
        *t = c.tensor("param/" + name);
    }
    p.known_means = c.tensor("state/known_means");
    const std::pair<const Tensor*, std::array<int, 2>> expect[] = {
        {&p.enc_w1, {m.input_dim, m.hidden_dim}},
        {&p.enc_w2, {m.hidden_dim, m.feature_dim}},
        {&p.proj_skip, {m.feature_dim, m.proj_dim}},
        {&p.prototypes, {m.num_classes, m.feature_dim}},
        {&p.ova_heads, {m.num_known, m.proj_dim + 1}},
    };
    for (const auto& [t, shape] : expect) {
        if (t->rows() != static_cast<std::size_t>(shape[0]) || t->cols() != static_cast<std::size_t>(shape[1])) {
            throw ParseError("checkpoint tensor shape " + t->shape_string() + " disagrees with model config");
        }
    }
    return p;
}

}  // namespace rpc
