#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rpc/error.hpp"
#include "rpc/random.hpp"
#include "rpc/tensor.hpp"

namespace rpc {

struct WorldConfig {
    int num_classes_total = 10;  // K
    int num_known = 5;           // C_L
    int dim_input = 32;
    int samples_per_class = 100;
    double class_separation = 10.0;  // in units of within-class std
    double labeled_fraction = 0.5;
    std::uint64_t seed = 0;

    int labeled_per_class() const {
        return static_cast<int>(std::floor(samples_per_class * labeled_fraction));
    }

    void validate() const {
        if (num_known < 1 || num_known >= num_classes_total) {
            throw ConfigError("world: need 1 <= num_known < num_classes_total (got " +
                              std::to_string(num_known) + ", " + std::to_string(num_classes_total) + ")");
        }
        if (dim_input < 1 || samples_per_class < 1) {
            throw ConfigError("world: dim_input and samples_per_class must be positive");
        }
        if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) {
            throw ConfigError("world: labeled_fraction must lie in (0, 1]");
        }
        if (!(class_separation >= 0.0)) {
            throw ConfigError("world: class_separation must be nonnegative");
        }
        if (labeled_per_class() < 1) {
            throw ConfigError("world: samples_per_class * labeled_fraction < 1 leaves no labeled samples");
        }
    }
};

/// Training view of a generated world. Holds no ground truth for the
/// unlabeled pool; that lives in EvalHandle.
struct GcdSplit {
    int num_classes = 0;
    int num_known = 0;
    std::uint64_t seed = 0;
    Tensor labeled;               // n_l × dim
    std::vector<int> labels;      // n_l, each < num_known
    Tensor unlabeled;             // n_u × dim

    std::size_t dim() const { return labeled.cols(); }
    friend bool operator==(const GcdSplit&, const GcdSplit&) = default;
};

/// Evaluation-only ground truth for the unlabeled pool.
class EvalHandle {
  public:
    EvalHandle() = default;
    EvalHandle(std::vector<int> truth, int num_classes, int num_known)
        : truth_(std::move(truth)), num_classes_(num_classes), num_known_(num_known) {}

    std::span<const int> truth() const noexcept { return truth_; }
    int num_classes() const noexcept { return num_classes_; }
    int num_known() const noexcept { return num_known_; }

    std::vector<bool> known_mask() const {
        std::vector<bool> m(truth_.size());
        for (std::size_t i = 0; i < truth_.size(); ++i) {
            m[i] = truth_[i] < num_known_;
        }
        return m;
    }

    friend bool operator==(const EvalHandle&, const EvalHandle&) = default;

  private:
    std::vector<int> truth_;
    int num_classes_ = 0;
    int num_known_ = 0;
};

struct World {
    GcdSplit split;
    EvalHandle truth;
    Tensor centers;  // K × dim, kept for oracles
};

namespace detail {

// Independent uniform directions on a sphere of radius separation / sqrt(2);
// in high dimension the pairwise distances concentrate near the separation.
inline Tensor class_centers(int k, int dim, double separation, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor c(k, dim);
    for (double& v : c.data()) {
        v = normal(rng);
    }
    c = kernels::l2_normalize_rows(c, 1e-12);
    const double radius = separation / std::sqrt(2.0);
    for (double& v : c.data()) {
        v *= radius;
    }
    return c;
}

}  // namespace detail

/// Gaussian-mixture world with the standard GCD split: a fixed fraction of
/// each known class is labeled; everything else, including all samples of
/// novel classes, goes to the unlabeled pool.
inline World generate_world(const WorldConfig& cfg) {
    cfg.validate();
    Rng rng = make_rng(cfg.seed, "world");
    std::normal_distribution<double> normal(0.0, 1.0);

    const int k = cfg.num_classes_total;
    const int dim = cfg.dim_input;
    Tensor centers = detail::class_centers(k, dim, cfg.class_separation, rng);

    const int per_labeled = cfg.labeled_per_class();
    std::vector<std::vector<double>> lab_rows, unl_rows;
    std::vector<int> lab_y, unl_y;
    for (int c = 0; c < k; ++c) {
        for (int s = 0; s < cfg.samples_per_class; ++s) {
            std::vector<double> x(dim);
            for (int p = 0; p < dim; ++p) {
                x[p] = centers(c, p) + normal(rng);
            }
            if (c < cfg.num_known && s < per_labeled) {
                lab_rows.push_back(std::move(x));
                lab_y.push_back(c);
            } else {
                unl_rows.push_back(std::move(x));
                unl_y.push_back(c);
            }
        }
    }

    auto shuffled = [&rng](std::size_t n) {
        std::vector<std::size_t> p(n);
        std::iota(p.begin(), p.end(), 0);
        std::shuffle(p.begin(), p.end(), rng);
        return p;
    };
    const auto lp = shuffled(lab_rows.size());
    const auto up = shuffled(unl_rows.size());

    World w;
    w.split.num_classes = k;
    w.split.num_known = cfg.num_known;
    w.split.seed = cfg.seed;
    w.split.labeled = Tensor(lab_rows.size(), dim);
    w.split.unlabeled = Tensor(unl_rows.size(), dim);
    std::vector<int> truth(unl_rows.size());
    for (std::size_t i = 0; i < lp.size(); ++i) {
        std::copy(lab_rows[lp[i]].begin(), lab_rows[lp[i]].end(), w.split.labeled.row_span(i).begin());
        w.split.labels.push_back(lab_y[lp[i]]);
    }
    for (std::size_t i = 0; i < up.size(); ++i) {
        std::copy(unl_rows[up[i]].begin(), unl_rows[up[i]].end(), w.split.unlabeled.row_span(i).begin());
        truth[i] = unl_y[up[i]];
    }
    w.truth = EvalHandle(std::move(truth), k, cfg.num_known);
    w.centers = std::move(centers);
    return w;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

enum class AugmentStrength { weak, strong };

struct AugmentConfig {
    double sigma_weak = 0.2;
    double sigma_strong = 0.6;
    double drop_prob_strong = 0.1;
    double scale_jitter_strong = 0.2;

    void validate() const {
        if (!(sigma_weak >= 0.0 && sigma_weak < sigma_strong)) {
            throw ConfigError("augment: need 0 <= sigma_weak < sigma_strong");
        }
        if (!(drop_prob_strong >= 0.0 && drop_prob_strong <= 0.5)) {
            throw ConfigError("augment: drop_prob_strong must lie in [0, 0.5]");
        }
        if (!(scale_jitter_strong >= 0.0 && scale_jitter_strong < 1.0)) {
            throw ConfigError("augment: scale_jitter_strong must lie in [0, 1)");
        }
    }
};

/// One drawn transform: x -> (x * scale + noise) * keep.
struct AugmentInstance {
    std::vector<double> scale;
    std::vector<double> noise;
    std::vector<double> keep;

    std::vector<double> apply(std::span<const double> x) const {
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            out[i] = (x[i] * scale[i] + noise[i]) * keep[i];
        }
        return out;
    }

    /// Applies the same transform to every row.
    Tensor apply_rows(const Tensor& x) const {
        Tensor out(x.rows(), x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r) {
            auto in = x.row_span(r);
            auto o = out.row_span(r);
            for (std::size_t i = 0; i < in.size(); ++i) {
                o[i] = (in[i] * scale[i] + noise[i]) * keep[i];
            }
        }
        return out;
    }
};

inline AugmentInstance sample_augmentation(std::size_t dim, AugmentStrength which,
                                           const AugmentConfig& cfg, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    AugmentInstance a{std::vector<double>(dim, 1.0), std::vector<double>(dim, 0.0),
                      std::vector<double>(dim, 1.0)};
    if (which == AugmentStrength::weak) {
        for (auto& n : a.noise) {
            n = cfg.sigma_weak * normal(rng);
        }
        return a;
    }
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double j = cfg.scale_jitter_strong;
    for (auto& s : a.scale) {
        s = 1.0 - j + 2.0 * j * unit(rng);
    }
    for (auto& n : a.noise) {
        n = cfg.sigma_strong * normal(rng);
    }
    for (auto& k : a.keep) {
        k = unit(rng) < cfg.drop_prob_strong ? 0.0 : 1.0;
    }
    return a;
}

inline std::vector<double> augment(std::span<const double> x, AugmentStrength which,
                                   const AugmentConfig& cfg, Rng& rng) {
    return sample_augmentation(x.size(), which, cfg, rng).apply(x);
}

/// Nearest-center classifier accuracy against the hidden truth. Used to
/// confirm a world is separable before trusting end-to-end numbers.
inline double nearest_center_accuracy(const World& w) {
    const Tensor& x = w.split.unlabeled;
    const auto truth = w.truth.truth();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        int best = 0;
        double best_d = INFINITY;
        for (std::size_t c = 0; c < w.centers.rows(); ++c) {
            double d = 0.0;
            for (std::size_t p = 0; p < x.cols(); ++p) {
                const double e = x(i, p) - w.centers(c, p);
                d += e * e;
            }
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(c);
            }
        }
        correct += best == truth[i];
    }
    return x.rows() == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(x.rows());
}

}  // namespace rpc
