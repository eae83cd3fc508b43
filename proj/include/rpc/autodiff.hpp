#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rpc/error.hpp"
#include "rpc/tensor.hpp"

namespace rpc {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning Tape is alive.
class Var {
  public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

    inline const Tensor& value() const;
    inline bool requires_grad() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    double item() const { return value().item(); }

  private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always topologically sorted and backward() is a single reverse
/// sweep. Single-owner: build and differentiate on one thread.
class Tape {
  public:
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    struct Node {
        std::string op;
        Tensor value;
        Tensor grad;  // empty until something is accumulated
        bool requires_grad = false;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// A tape whose detach() calls return the given values in order instead
    /// of the live ones. Finite-difference checks use this so stop-gradient
    /// targets stay pinned at the base point.
    static Tape replaying(std::vector<Tensor> detached) {
        Tape t;
        t.replay_ = true;
        t.detach_log_ = std::move(detached);
        return t;
    }

    Tape(Tape&& o) noexcept = default;

    Var constant(Tensor v) { return push("constant", std::move(v), {}, false, nullptr); }
    Var variable(Tensor v) { return push("variable", std::move(v), {}, true, nullptr); }

    /// Records an op output. The output requires grad iff any input does;
    /// the backward rule is dropped otherwise.
    Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
               BackwardFn fn) {
        require_finite(value, op);
        bool rg = false;
        std::vector<std::size_t> ids;
        ids.reserve(inputs.size());
        for (const Var& v : inputs) {
            if (&v.tape() != this) {
                throw ContractError(std::string(op) + ": inputs live on different tapes");
            }
            rg = rg || nodes_[v.id()].requires_grad;
            ids.push_back(v.id());
        }
        return push(op, std::move(value), std::move(ids), rg, rg ? std::move(fn) : nullptr);
    }

    Var detach(const Var& v) {
        if (replay_) {
            if (replay_pos_ >= detach_log_.size()) {
                throw ContractError("detach replay exhausted: evaluation path changed");
            }
            return constant(detach_log_[replay_pos_++]);
        }
        detach_log_.push_back(v.value());
        return constant(v.value());
    }

    const std::vector<Tensor>& detached_values() const noexcept { return detach_log_; }

    const Node& node(std::size_t id) const { return nodes_.at(id); }
    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Gradient of the last backward() target w.r.t. v; zeros if v was not
    /// reached.
    Tensor grad(const Var& v) const {
        const Node& n = nodes_.at(v.id());
        if (n.grad.size() == 0) {
            return Tensor(n.value.rows(), n.value.cols());
        }
        return n.grad;
    }

    const Tensor& grad_ref(std::size_t id) const { return nodes_[id].grad; }

    void accumulate(std::size_t id, const Tensor& g) {
        Node& n = nodes_[id];
        if (!n.requires_grad) {
            return;
        }
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            kernels::add_inplace(n.grad, g);
        }
    }

    bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    void backward(const Var& loss) {
        if (&loss.tape() != this) {
            throw ContractError("backward: loss is not on this tape");
        }
        const Node& root = nodes_[loss.id()];
        if (!root.value.is_scalar()) {
            throw ContractError("backward: loss must be scalar, got shape " +
                                root.value.shape_string());
        }
        for (Node& n : nodes_) {
            n.grad = Tensor();
        }
        nodes_[loss.id()].grad = Tensor::scalar(1.0);
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.backward && n.grad.size() != 0) {
                n.backward(*this, i);
            }
        }
    }

  private:
    Var push(std::string_view op, Tensor value, std::vector<std::size_t> inputs, bool rg,
             BackwardFn fn) {
        nodes_.push_back(Node{std::string(op), std::move(value), Tensor(), rg, std::move(inputs),
                              std::move(fn)});
        return Var(this, nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
    std::vector<Tensor> detach_log_;
    std::size_t replay_pos_ = 0;
    bool replay_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->needs_grad(id_); }

// ---------------------------------------------------------------------------
// Differentiable ops
// ---------------------------------------------------------------------------

namespace detail {
inline Tape& tape_of(const Var& a, const Var& b) {
    if (&a.tape() != &b.tape()) {
        throw ContractError("operands live on different tapes");
    }
    return a.tape();
}
}  // namespace detail

inline Var detach(const Var& a) { return a.tape().detach(a); }

inline Var matmul(const Var& a, const Var& b) {
    Tape& t = detail::tape_of(a, b);
    const std::size_t ia = a.id(), ib = b.id();
    return t.record("matmul", kernels::matmul(a.value(), b.value()), {a, b},
                    [ia, ib](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad_ref(self);
                        if (t.needs_grad(ia)) {
                            t.accumulate(ia, kernels::matmul_nt(g, t.value(ib)));
                        }
                        if (t.needs_grad(ib)) {
                            t.accumulate(ib, kernels::matmul_tn(t.value(ia), g));
                        }
                    });
}

/// a b^T
inline Var matmul_nt(const Var& a, const Var& b) {
    Tape& t = detail::tape_of(a, b);
    const std::size_t ia = a.id(), ib = b.id();
    return t.record("matmul_nt", kernels::matmul_nt(a.value(), b.value()), {a, b},
                    [ia, ib](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad_ref(self);
                        if (t.needs_grad(ia)) {
                            t.accumulate(ia, kernels::matmul(g, t.value(ib)));
                        }
                        if (t.needs_grad(ib)) {
                            t.accumulate(ib, kernels::matmul_tn(g, t.value(ia)));
                        }
                    });
}

inline Var transpose(const Var& a) {
    const std::size_t ia = a.id();
    return a.tape().record("transpose", kernels::transpose(a.value()), {a},
                           [ia](Tape& t, std::size_t self) {
                               t.accumulate(ia, kernels::transpose(t.grad_ref(self)));
                           });
}

inline Var add(const Var& a, const Var& b) {
    Tape& t = detail::tape_of(a, b);
    require_same_shape(a.value(), b.value(), "add");
    const std::size_t ia = a.id(), ib = b.id();
    return t.record("add", kernels::zip(a.value(), b.value(), std::plus<>{}), {a, b},
                    [ia, ib](Tape& t, std::size_t self) {
                        t.accumulate(ia, t.grad_ref(self));
                        t.accumulate(ib, t.grad_ref(self));
                    });
}

inline Var sub(const Var& a, const Var& b) {
    Tape& t = detail::tape_of(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    const std::size_t ia = a.id(), ib = b.id();
    return t.record("sub", kernels::zip(a.value(), b.value(), std::minus<>{}), {a, b},
                    [ia, ib](Tape& t, std::size_t self) {
                        t.accumulate(ia, t.grad_ref(self));
                        if (t.needs_grad(ib)) {
                            t.accumulate(ib, kernels::map(t.grad_ref(self), [](double v) { return -v; }));
                        }
                    });
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
    Tape& t = detail::tape_of(a, b);
    require_same_shape(a.value(), b.value(), "mul");
    const std::size_t ia = a.id(), ib = b.id();
    return t.record("mul", kernels::zip(a.value(), b.value(), std::multiplies<>{}), {a, b},
                    [ia, ib](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad_ref(self);
                        if (t.needs_grad(ia)) {
                            t.accumulate(ia, kernels::zip(g, t.value(ib), std::multiplies<>{}));
                        }
                        if (t.needs_grad(ib)) {
                            t.accumulate(ib, kernels::zip(g, t.value(ia), std::multiplies<>{}));
                        }
                    });
}

inline Var scale(const Var& a, double c) {
    const std::size_t ia = a.id();
    return a.tape().record("scale", kernels::map(a.value(), [c](double v) { return c * v; }), {a},
                           [ia, c](Tape& t, std::size_t self) {
                               t.accumulate(ia, kernels::map(t.grad_ref(self),
                                                             [c](double v) { return c * v; }));
                           });
}

inline Var add_scalar(const Var& a, double c) {
    const std::size_t ia = a.id();
    return a.tape().record("add_scalar", kernels::map(a.value(), [c](double v) { return v + c; }),
                           {a}, [ia](Tape& t, std::size_t self) { t.accumulate(ia, t.grad_ref(self)); });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }

/// Adds a 1×n row to every row of a (bias broadcast).
inline Var add_row(const Var& a, const Var& row) {
    Tape& t = detail::tape_of(a, row);
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw DimensionError("add_row: expected 1x" + std::to_string(a.cols()) + " row, got " +
                             row.value().shape_string());
    }
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row_span(i);
        for (std::size_t j = 0; j < r.size(); ++j) {
            r[j] += row.value()[j];
        }
    }
    const std::size_t ia = a.id(), ir = row.id();
    return t.record("add_row", std::move(out), {a, row}, [ia, ir](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_ref(self);
        t.accumulate(ia, g);
        if (t.needs_grad(ir)) {
            Tensor gr(1, g.cols());
            for (std::size_t i = 0; i < g.rows(); ++i) {
                for (std::size_t j = 0; j < g.cols(); ++j) {
                    gr[j] += g(i, j);
                }
            }
            t.accumulate(ir, gr);
        }
    });
}

/// Multiplies row i of a by col(i, 0).
inline Var mul_col(const Var& a, const Var& col) {
    Tape& t = detail::tape_of(a, col);
    if (col.cols() != 1 || col.rows() != a.rows()) {
        throw DimensionError("mul_col: expected " + std::to_string(a.rows()) + "x1 column, got " +
                             col.value().shape_string());
    }
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.rows(); ++i) {
        for (double& v : out.row_span(i)) {
            v *= col.value()[i];
        }
    }
    const std::size_t ia = a.id(), ic = col.id();
    return t.record("mul_col", std::move(out), {a, col}, [ia, ic](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_ref(self);
        const Tensor& av = t.value(ia);
        const Tensor& cv = t.value(ic);
        if (t.needs_grad(ia)) {
            Tensor ga = g;
            for (std::size_t i = 0; i < ga.rows(); ++i) {
                for (double& v : ga.row_span(i)) {
                    v *= cv[i];
                }
            }
            t.accumulate(ia, ga);
        }
        if (t.needs_grad(ic)) {
            Tensor gc(cv.rows(), 1);
            for (std::size_t i = 0; i < g.rows(); ++i) {
                for (std::size_t j = 0; j < g.cols(); ++j) {
                    gc[i] += g(i, j) * av(i, j);
                }
            }
            t.accumulate(ic, gc);
        }
    });
}

namespace detail {
template <class F, class D>
Var unary(const Var& a, std::string_view name, F&& f, D&& dfdx_from_xy) {
    const std::size_t ia = a.id();
    Tensor y = kernels::map(a.value(), f);
    return a.tape().record(name, std::move(y), {a}, [ia, dfdx_from_xy](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_ref(self);
        const Tensor& x = t.value(ia);
        const Tensor& y = t.value(self);
        Tensor gx(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.size(); ++i) {
            gx[i] = g[i] * dfdx_from_xy(x[i], y[i]);
        }
        t.accumulate(ia, gx);
    });
}
}  // namespace detail

inline Var tanh(const Var& a) {
    return detail::unary(a, "tanh", [](double x) { return std::tanh(x); },
                         [](double, double y) { return 1.0 - y * y; });
}

inline Var exp(const Var& a) {
    return detail::unary(a, "exp", [](double x) { return std::exp(x); },
                         [](double, double y) { return y; });
}

inline Var log(const Var& a) {
    return detail::unary(a, "log", [](double x) { return std::log(x); },
                         [](double x, double) { return 1.0 / x; });
}

inline Var square(const Var& a) {
    return detail::unary(a, "square", [](double x) { return x * x; },
                         [](double x, double) { return 2.0 * x; });
}

inline Var sigmoid(const Var& a) {
    return detail::unary(a, "sigmoid", [](double x) { return kernels::sigmoid(x); },
                         [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(const Var& a) {
    return detail::unary(a, "softplus", [](double x) { return kernels::softplus(x); },
                         [](double x, double) { return kernels::sigmoid(x); });
}

inline Var sum(const Var& a) {
    const std::size_t ia = a.id();
    return a.tape().record("sum", Tensor::scalar(kernels::sum(a.value())), {a},
                           [ia](Tape& t, std::size_t self) {
                               const Tensor& x = t.value(ia);
                               t.accumulate(ia, Tensor(x.rows(), x.cols(), t.grad_ref(self).item()));
                           });
}

inline Var mean(const Var& a) {
    if (a.value().size() == 0) {
        throw ContractError("mean of empty tensor");
    }
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

/// m×n -> m×1 row sums.
inline Var row_sum(const Var& a) {
    const Tensor& x = a.value();
    Tensor out(x.rows(), 1);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (double v : x.row_span(i)) {
            out[i] += v;
        }
    }
    const std::size_t ia = a.id();
    return a.tape().record("row_sum", std::move(out), {a}, [ia](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_ref(self);
        const Tensor& x = t.value(ia);
        Tensor gx(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.rows(); ++i) {
            for (double& v : gx.row_span(i)) {
                v = g[i];
            }
        }
        t.accumulate(ia, gx);
    });
}

inline void require_positive_temperature(double temperature, std::string_view op) {
    if (!(temperature > 0.0)) {
        throw ParameterError(std::string(op) + ": temperature must be > 0, got " +
                             std::to_string(temperature));
    }
}

/// Row-wise softmax(x / temperature), max-subtracted.
inline Var softmax_rows(const Var& x, double temperature) {
    require_positive_temperature(temperature, "softmax_rows");
    const std::size_t ix = x.id();
    return x.tape().record(
        "softmax_rows", kernels::softmax_rows(x.value(), temperature), {x},
        [ix, temperature](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_ref(self);
            const Tensor& y = t.value(self);
            Tensor gx(y.rows(), y.cols());
            for (std::size_t i = 0; i < y.rows(); ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < y.cols(); ++j) {
                    dot += g(i, j) * y(i, j);
                }
                for (std::size_t j = 0; j < y.cols(); ++j) {
                    gx(i, j) = y(i, j) * (g(i, j) - dot) / temperature;
                }
            }
            t.accumulate(ix, gx);
        });
}

inline Var log_softmax_rows(const Var& x, double temperature) {
    require_positive_temperature(temperature, "log_softmax_rows");
    const std::size_t ix = x.id();
    return x.tape().record(
        "log_softmax_rows", kernels::log_softmax_rows(x.value(), temperature), {x},
        [ix, temperature](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_ref(self);
            const Tensor& y = t.value(self);
            Tensor gx(y.rows(), y.cols());
            for (std::size_t i = 0; i < y.rows(); ++i) {
                double gs = 0.0;
                for (std::size_t j = 0; j < y.cols(); ++j) {
                    gs += g(i, j);
                }
                for (std::size_t j = 0; j < y.cols(); ++j) {
                    gx(i, j) = (g(i, j) - std::exp(y(i, j)) * gs) / temperature;
                }
            }
            t.accumulate(ix, gx);
        });
}

/// Log-softmax over the entries of each row where keep(i, j) != 0. Excluded
/// entries are output as 0 and receive no gradient.
inline Var masked_log_softmax_rows(const Var& x, double temperature, const Tensor& keep) {
    require_positive_temperature(temperature, "masked_log_softmax_rows");
    require_same_shape(x.value(), keep, "masked_log_softmax_rows");
    const Tensor& xv = x.value();
    Tensor out(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < xv.cols(); ++j) {
            if (keep(i, j) != 0.0) {
                mx = std::max(mx, xv(i, j));
            }
        }
        if (mx == -INFINITY) {
            continue;
        }
        double z = 0.0;
        for (std::size_t j = 0; j < xv.cols(); ++j) {
            if (keep(i, j) != 0.0) {
                z += std::exp((xv(i, j) - mx) / temperature);
            }
        }
        const double lz = std::log(z);
        for (std::size_t j = 0; j < xv.cols(); ++j) {
            if (keep(i, j) != 0.0) {
                out(i, j) = (xv(i, j) - mx) / temperature - lz;
            }
        }
    }
    const std::size_t ix = x.id();
    return x.tape().record(
        "masked_log_softmax_rows", std::move(out), {x},
        [ix, temperature, keep](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_ref(self);
            const Tensor& y = t.value(self);
            Tensor gx(y.rows(), y.cols());
            for (std::size_t i = 0; i < y.rows(); ++i) {
                double gs = 0.0;
                for (std::size_t j = 0; j < y.cols(); ++j) {
                    if (keep(i, j) != 0.0) {
                        gs += g(i, j);
                    }
                }
                for (std::size_t j = 0; j < y.cols(); ++j) {
                    if (keep(i, j) != 0.0) {
                        gx(i, j) = (g(i, j) - std::exp(y(i, j)) * gs) / temperature;
                    }
                }
            }
            t.accumulate(ix, gx);
        });
}

/// Unit-norm rows; rows with norm below eps are scaled by 1/eps instead.
inline Var l2_normalize_rows(const Var& x, double eps = 1e-12) {
    const std::size_t ix = x.id();
    return x.tape().record(
        "l2_normalize_rows", kernels::l2_normalize_rows(x.value(), eps), {x},
        [ix, eps](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_ref(self);
            const Tensor& y = t.value(self);
            const auto norms = kernels::row_norms(t.value(ix));
            Tensor gx(y.rows(), y.cols());
            for (std::size_t i = 0; i < y.rows(); ++i) {
                if (norms[i] < eps) {
                    for (std::size_t j = 0; j < y.cols(); ++j) {
                        gx(i, j) = g(i, j) / eps;
                    }
                    continue;
                }
                double dot = 0.0;
                for (std::size_t j = 0; j < y.cols(); ++j) {
                    dot += y(i, j) * g(i, j);
                }
                for (std::size_t j = 0; j < y.cols(); ++j) {
                    gx(i, j) = (g(i, j) - y(i, j) * dot) / norms[i];
                }
            }
            t.accumulate(ix, gx);
        });
}

inline Var gather_rows(const Var& a, std::vector<std::size_t> idx) {
    Tensor out = kernels::gather_rows(a.value(), idx);
    const std::size_t ia = a.id();
    return a.tape().record("gather_rows", std::move(out), {a},
                           [ia, idx = std::move(idx)](Tape& t, std::size_t self) {
                               const Tensor& g = t.grad_ref(self);
                               const Tensor& x = t.value(ia);
                               Tensor gx(x.rows(), x.cols());
                               for (std::size_t r = 0; r < idx.size(); ++r) {
                                   auto dst = gx.row_span(idx[r]);
                                   auto src = g.row_span(r);
                                   for (std::size_t j = 0; j < dst.size(); ++j) {
                                       dst[j] += src[j];
                                   }
                               }
                               t.accumulate(ia, gx);
                           });
}

/// Row i taken from a when take_a[i], otherwise from b.
inline Var rows_where(const std::vector<bool>& take_a, const Var& a, const Var& b) {
    Tape& t = detail::tape_of(a, b);
    require_same_shape(a.value(), b.value(), "rows_where");
    if (take_a.size() != a.rows()) {
        throw DimensionError("rows_where: mask length differs from row count");
    }
    Tensor out = b.value();
    for (std::size_t i = 0; i < out.rows(); ++i) {
        if (take_a[i]) {
            auto src = a.value().row_span(i);
            std::copy(src.begin(), src.end(), out.row_span(i).begin());
        }
    }
    const std::size_t ia = a.id(), ib = b.id();
    return t.record("rows_where", std::move(out), {a, b}, [ia, ib, take_a](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_ref(self);
        Tensor ga(g.rows(), g.cols()), gb(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i) {
            auto dst = take_a[i] ? ga.row_span(i) : gb.row_span(i);
            auto src = g.row_span(i);
            std::copy(src.begin(), src.end(), dst.begin());
        }
        t.accumulate(ia, ga);
        t.accumulate(ib, gb);
    });
}

/// [a, 1]: appends a constant column of ones (bias trick).
inline Var append_ones_col(const Var& a) {
    const Tensor& x = a.value();
    Tensor out(x.rows(), x.cols() + 1, 1.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto src = x.row_span(i);
        std::copy(src.begin(), src.end(), out.row_span(i).begin());
    }
    const std::size_t ia = a.id();
    return a.tape().record("append_ones_col", std::move(out), {a}, [ia](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_ref(self);
        const Tensor& x = t.value(ia);
        Tensor gx(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.rows(); ++i) {
            auto src = g.row_span(i);
            std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(x.cols()), gx.row_span(i).begin());
        }
        t.accumulate(ia, gx);
    });
}

/// D(i, j) = ||a_i - a_j||^2 for all row pairs.
inline Var pairwise_sq_dist(const Var& a) {
    const Tensor& x = a.value();
    const std::size_t n = x.rows();
    Tensor out(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < x.cols(); ++k) {
                const double d = x(i, k) - x(j, k);
                s += d * d;
            }
            out(i, j) = s;
            out(j, i) = s;
        }
    }
    const std::size_t ia = a.id();
    return a.tape().record("pairwise_sq_dist", std::move(out), {a}, [ia](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_ref(self);
        const Tensor& x = t.value(ia);
        const std::size_t n = x.rows();
        Tensor gx(n, x.cols());
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) {
                    continue;
                }
                const double c = 2.0 * (g(i, j) + g(j, i));
                for (std::size_t k = 0; k < x.cols(); ++k) {
                    gx(i, k) += c * (x(i, k) - x(j, k));
                }
            }
        }
        t.accumulate(ia, gx);
    });
}

}  // namespace rpc
