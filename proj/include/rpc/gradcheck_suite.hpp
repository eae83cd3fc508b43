#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "rpc/autodiff.hpp"
#include "rpc/gradcheck.hpp"
#include "rpc/losses.hpp"
#include "rpc/model.hpp"
#include "rpc/random.hpp"
#include "rpc/trainer.hpp"

namespace rpc {

inline constexpr double kGradcheckTolerance = 1e-4;

struct GradcheckRow {
    std::string name;
    std::size_t instances = 0;
    std::size_t coordinates = 0;
    double max_rel_error = 0.0;
    std::size_t worst_instance = 0;

    bool passed() const { return max_rel_error < kGradcheckTolerance; }
};

namespace suite_detail {

inline Tensor randn(std::size_t r, std::size_t c, double std, Rng& rng) {
    std::normal_distribution<double> n(0.0, std);
    Tensor t(r, c);
    for (double& v : t.data()) {
        v = n(rng);
    }
    return t;
}

inline std::vector<double> uniform(std::size_t n, double lo, double hi, Rng& rng) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (double& x : v) {
        x = u(rng);
    }
    return v;
}

/// One random instance: the function and the point to check it at.
struct Instance {
    TapeFunction f;
    std::vector<Tensor> inputs;
};

using InstanceFactory = std::function<Instance(Rng&)>;

inline Instance unsup_instance(Rng& rng) {
    return {[](Tape&, std::span<const Var> v) {
                return unsup_contrastive(l2_normalize_rows(v[0]), l2_normalize_rows(v[1]), 0.07);
            },
            {randn(6, 4, 1.0, rng), randn(6, 4, 1.0, rng)}};
}

inline Instance sup_instance(Rng& rng) {
    return {[](Tape&, std::span<const Var> v) {
                static const std::vector<int> labels = {0, 1, 0, 1, 2, 2};
                return sup_contrastive(l2_normalize_rows(v[0]), l2_normalize_rows(v[1]), labels, 0.1);
            },
            {randn(6, 4, 1.0, rng), randn(6, 4, 1.0, rng)}};
}

inline Instance classifier_instance(Rng& rng) {
    return {[](Tape&, std::span<const Var> v) {
                static const std::vector<int> labels = {0, 1, -1, 2, -1, -1};
                return classifier_losses(softmax_rows(v[0], 0.1), softmax_rows(v[1], 0.1), labels, 3, 0.35, 1.0);
            },
            {randn(6, 5, 0.1, rng), randn(6, 5, 0.1, rng)}};
}

inline Instance align_instance(Rng& rng) {
    // B = 2 anchors with mu_id = 2 partners each.
    const std::vector<bool> labeled = {true, false, false, true, false, false};
    std::vector<double> w = uniform(6, 0.2, 1.0, rng);
    w[0] = w[3] = 1.0;
    const Tensor a = fusion_matrix(w, 0.3);
    return {[labeled, w, a](Tape&, std::span<const Var> v) {
                Var d = behavioral_delta(l2_normalize_rows(v[0]), l2_normalize_rows(v[1]), labeled, a, true);
                return *align_loss(d, labeled, w).loss;
            },
            {randn(6, 4, 1.0, rng), randn(6, 4, 1.0, rng)}};
}

inline Instance discovery_instance(Rng& rng) {
    const std::vector<double> w_new = uniform(6, 0.1, 1.0, rng);
    return {[w_new](Tape&, std::span<const Var> v) { return discovery_loss(v[0], v[1], w_new, 0.07); },
            {randn(6, 4, 1.0, rng), randn(3, 4, 1.0, rng)}};
}

inline Instance ova_instance(Rng& rng) {
    auto params = std::make_shared<ModelParams>();
    params->config.num_known = 3;
    return {[params](Tape& t, std::span<const Var> v) {
                static const std::vector<int> labels = {0, 1, 2, 0, 2, 1};
                BoundParams bp;
                bp.config = &params->config;
                bp.ova_heads = v[1];
                (void)t;
                return ova_bce_loss(bp, v[0], labels);
            },
            {randn(6, 4, 1.0, rng), randn(3, 5, 1.0, rng)}};
}

/// The trainer's full step objective (all RPC terms active) on a tiny model,
/// differentiated with respect to every trainable parameter.
inline Instance total_instance(Rng& rng, bool literal) {
    ModelConfig mc;
    mc.input_dim = 3;
    mc.hidden_dim = 4;
    mc.feature_dim = 3;
    mc.proj_hidden_dim = 4;
    mc.proj_dim = 3;
    mc.num_classes = 4;
    mc.num_known = 2;
    mc.known_prototypes = literal ? KnownPrototypeSource::classifier : KnownPrototypeSource::feature_mean;
    auto params = std::make_shared<ModelParams>(init_params(mc, rng));
    params->ova_heads = randn(2, 4, 1.0, rng);
    params->proj_w2 = randn(4, 3, 0.5, rng);
    params->known_means = randn(2, 3, 1.0, rng);

    LossWeights lw;
    if (literal) {
        lw.normalize_discover = false;
        lw.discover_detach_similarity = false;
        lw.tau_u = 0.5;  // keeps exp(cos / tau) and the unnormalized sum moderate
    }
    const std::vector<double> pool = uniform(6, 0.05, 0.95, rng);
    auto fb = std::make_shared<FusedBatch>(build_batch(3, pool, 3, 2, 0.5, lw.alpha, 3, AugmentConfig{}, rng));
    std::vector<double> unl_w(fb->unlabeled.size());
    for (std::size_t j = 0; j < unl_w.size(); ++j) {
        unl_w[j] = pool[fb->unlabeled[j]];
    }
    const Tensor xw = randn(fb->step_rows(), 3, 1.0, rng);
    const Tensor xs = randn(fb->step_rows(), 3, 1.0, rng);
    std::vector<Tensor> inputs;
    for (const auto& [name, t] : params->trainable()) {
        inputs.push_back(*t);
    }
    return {[params, fb, unl_w, xw, xs, lw](Tape& t, std::span<const Var> v) {
                static const std::vector<int> labels = {0, 1, 0};
                const BoundParams bp = bind_vars(*params, v, t.constant(params->known_means));
                return step_objective<Objective::rpc>(bp, t.constant(xw), t.constant(xs), labels, *fb, unl_w, lw,
                                                      true, true)
                    .objective;
            },
            std::move(inputs)};
}

/// True when no nonzero analytic gradient coordinate is below 1e-6 of the
/// largest one. Below that ratio float64 central differences are dominated by
/// roundoff and the per-coordinate relative error stops measuring anything.
inline bool well_conditioned(const Instance& inst) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& x : inst.inputs) {
        vars.push_back(tape.variable(x));
    }
    tape.backward(inst.f(tape, vars));
    double gmax = 0.0;
    std::vector<Tensor> grads;
    for (const auto& v : vars) {
        grads.push_back(tape.grad(v));
        for (double g : grads.back().data()) {
            gmax = std::max(gmax, std::abs(g));
        }
    }
    for (const auto& g : grads) {
        for (double x : g.data()) {
            if (x != 0.0 && std::abs(x) < 1e-6 * gmax) {
                return false;
            }
        }
    }
    return true;
}

}  // namespace suite_detail

struct GradcheckCase {
    std::string name;
    suite_detail::InstanceFactory make;
};

inline std::vector<GradcheckCase> gradcheck_cases() {
    using namespace suite_detail;
    return {{"unsup_contrastive", unsup_instance},
            {"sup_contrastive", sup_instance},
            {"classifier_loss", classifier_instance},
            {"align_loss", align_instance},
            {"discovery_loss", discovery_instance},
            {"ova_bce_loss", ova_instance},
            {"total_loss", [](Rng& r) { return total_instance(r, false); }},
            {"total_loss_literal", [](Rng& r) { return total_instance(r, true); }}};
}

/// Runs every case on `instances` random instances drawn from `seed`.
inline std::vector<GradcheckRow> run_gradcheck_suite(std::size_t instances = 20, std::uint64_t seed = 0,
                                                     double h = 1e-5) {
    std::vector<GradcheckRow> rows;
    for (const auto& c : gradcheck_cases()) {
        GradcheckRow row{c.name, instances, 0, 0.0, 0};
        for (std::size_t i = 0; i < instances; ++i) {
            Rng rng = make_rng(seed, "gradcheck/" + c.name, i);
            suite_detail::Instance inst = c.make(rng);
            for (int attempt = 0; attempt < 100 && !suite_detail::well_conditioned(inst); ++attempt) {
                inst = c.make(rng);
            }
            const GradcheckResult r = finite_diff_gradcheck(inst.f, std::move(inst.inputs), h);
            row.coordinates += r.coordinates;
            if (r.max_rel_error >= row.max_rel_error) {
                row.max_rel_error = r.max_rel_error;
                row.worst_instance = i;
            }
        }
        rows.push_back(row);
    }
    return rows;
}

inline std::string gradcheck_table(const std::vector<GradcheckRow>& rows) {
    std::string s = "loss                  instances  coords   max_rel_err  status\n";
    for (const auto& r : rows) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-20s  %9zu  %6zu   %.3e    %s\n", r.name.c_str(), r.instances, r.coordinates,
                      r.max_rel_error, r.passed() ? "PASS" : "FAIL");
        s += buf;
    }
    return s;
}

}  // namespace rpc
