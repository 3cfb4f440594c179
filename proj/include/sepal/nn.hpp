#ifndef SEPAL_NN_HPP
#define SEPAL_NN_HPP

#include "core.hpp"
#include "graphs.hpp"
#include "ingest.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

/**
 * @file nn.hpp
 *
 * @brief A small reverse-mode differentiation engine and the graph layers of the spatial model.
 *
 * Values live on a `Tape`. Each operation records its output and a closure that pushes the output gradient
 * back to its inputs. Parameters are referenced rather than copied, so binding a model to a fresh tape is cheap.
 */

namespace sepal::nn {

using Var = std::size_t;

/**
 * @brief Portable deterministic random source.
 *
 * Uniform and normal draws are computed from raw 64-bit Mersenne Twister output,
 * so streams are identical across standard library implementations.
 */
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /** Uniform on [0, 1). */
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /** Standard normal via Box-Muller. */
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    /** Uniform integer in [0, n). */
    std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

    /** Fisher-Yates shuffle. */
    template<typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0;
};

namespace detail {

inline void check(bool ok, const std::string& what) {
    if (!ok) {
        throw Error(ErrorKind::ShapeMismatch, what);
    }
}

/** a * b^T */
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    check(a.cols() == b.cols(), "matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()) + ")");
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto ar = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            auto br = b.row(j);
            double s = 0;
            for (std::size_t k = 0; k < ar.size(); ++k) {
                s += ar[k] * br[k];
            }
            out(i, j) = s;
        }
    }
    return out;
}

/** out += a * b */
inline void matmul_nn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto orow = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double av = a(i, k);
            if (av == 0) {
                continue;
            }
            auto br = b.row(k);
            for (std::size_t j = 0; j < br.size(); ++j) {
                orow[j] += av * br[j];
            }
        }
    }
}

/** out += a^T * b */
inline void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
    for (std::size_t k = 0; k < a.rows(); ++k) {
        auto ar = a.row(k);
        auto br = b.row(k);
        for (std::size_t i = 0; i < ar.size(); ++i) {
            const double av = ar[i];
            if (av == 0) {
                continue;
            }
            auto orow = out.row(i);
            for (std::size_t j = 0; j < br.size(); ++j) {
                orow[j] += av * br[j];
            }
        }
    }
}

}

/**
 * `x * W^T + b`, with `b` broadcast over rows. `b` may be a 1 x out or empty matrix.
 */
inline Matrix linear_apply(const Matrix& x, const Matrix& weight, const Matrix& bias) {
    Matrix out = detail::matmul_nt(x, weight);
    if (!bias.empty()) {
        detail::check(bias.rows() == 1 && bias.cols() == out.cols(), "linear: bias width does not match output");
        for (std::size_t i = 0; i < out.rows(); ++i) {
            auto row = out.row(i);
            for (std::size_t j = 0; j < row.size(); ++j) {
                row[j] += bias(0, j);
            }
        }
    }
    return out;
}

/**
 * @brief Sparse square operator, stored as per-row (column, weight) lists.
 */
struct SparseOperator {
    std::size_t n = 0;
    std::vector<std::vector<std::pair<std::size_t, double>>> rows;

    Matrix apply(const Matrix& h) const {
        detail::check(h.rows() == n, "sparse operator: row count mismatch");
        Matrix out(n, h.cols());
        for (std::size_t i = 0; i < n; ++i) {
            auto orow = out.row(i);
            for (auto [j, w] : rows[i]) {
                auto hr = h.row(j);
                for (std::size_t c = 0; c < hr.size(); ++c) {
                    orow[c] += w * hr[c];
                }
            }
        }
        return out;
    }

    /** out += A^T g */
    void apply_transpose_acc(const Matrix& g, Matrix& out) const {
        for (std::size_t i = 0; i < n; ++i) {
            auto grow = g.row(i);
            for (auto [j, w] : rows[i]) {
                auto orow = out.row(j);
                for (std::size_t c = 0; c < grow.size(); ++c) {
                    orow[c] += w * grow[c];
                }
            }
        }
    }
};

/**
 * Symmetric-normalized adjacency with self-loops, `D^-1/2 (A + I) D^-1/2`.
 */
inline SparseOperator gcn_normalized(std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
    std::vector<double> degree(n, 1.0);
    for (auto [a, b] : edges) {
        detail::check(a < n && b < n && a != b, "edge list has an out-of-range index or self-loop");
        degree[a] += 1;
        degree[b] += 1;
    }
    SparseOperator op;
    op.n = n;
    op.rows.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        op.rows[i].emplace_back(i, 1.0 / degree[i]);
    }
    for (auto [a, b] : edges) {
        const double w = 1.0 / std::sqrt(degree[a] * degree[b]);
        op.rows[a].emplace_back(b, w);
        op.rows[b].emplace_back(a, w);
    }
    for (auto& r : op.rows) {
        std::sort(r.begin(), r.end());
    }
    return op;
}

/**
 * Plain neighbour-sum operator (binary adjacency, no self-loops).
 */
inline SparseOperator neighbor_sum(std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
    SparseOperator op;
    op.n = n;
    op.rows.resize(n);
    for (auto [a, b] : edges) {
        detail::check(a < n && b < n && a != b, "edge list has an out-of-range index or self-loop");
        op.rows[a].emplace_back(b, 1.0);
        op.rows[b].emplace_back(a, 1.0);
    }
    for (auto& r : op.rows) {
        std::sort(r.begin(), r.end());
    }
    return op;
}

/**
 * @brief Recording of a computation for reverse-mode differentiation.
 */
class Tape {
public:
    using Backward = std::function<void(Tape&, Var)>;

    /** Value that does not receive gradients. */
    Var constant(Matrix value) {
        nodes_.push_back(Node{std::move(value), nullptr, {}, false, {}});
        return nodes_.size() - 1;
    }

    /** Trainable value, referenced in place; `value` must outlive the tape. */
    Var parameter(const Matrix& value) {
        nodes_.push_back(Node{{}, &value, {}, true, {}});
        return nodes_.size() - 1;
    }

    /** Trainable value owned by the tape. */
    Var leaf(Matrix value) {
        nodes_.push_back(Node{std::move(value), nullptr, {}, true, {}});
        return nodes_.size() - 1;
    }

    /** Record an operation result. The closure runs only when some input requires gradients. */
    Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
        bool needs = false;
        for (auto v : inputs) {
            needs = needs || nodes_.at(v).requires_grad;
        }
        nodes_.push_back(Node{std::move(value), nullptr, {}, needs, needs ? std::move(backward) : Backward{}});
        return nodes_.size() - 1;
    }

    const Matrix& value(Var v) const {
        const auto& n = nodes_.at(v);
        return n.external ? *n.external : n.owned;
    }

    bool requires_grad(Var v) const { return nodes_.at(v).requires_grad; }

    /** Gradient of the last `backward()` target with respect to `v`; zeros if `v` did not contribute. */
    const Matrix& grad(Var v) {
        auto& n = nodes_.at(v);
        if (n.grad.empty()) {
            const auto& val = value(v);
            n.grad = Matrix(val.rows(), val.cols());
        }
        return n.grad;
    }

    /** Accumulation buffer for the gradient of `v`, allocated on first use. */
    Matrix& grad_buffer(Var v) {
        grad(v);
        return nodes_[v].grad;
    }

    std::size_t size() const { return nodes_.size(); }

    /**
     * Back-propagate from a scalar (1 x 1) node.
     * @throws Error with `NoRecordedForward` if nothing has been recorded, or `loss` is not on this tape.
     */
    void backward(Var loss) {
        if (nodes_.empty() || loss >= nodes_.size()) {
            throw Error(ErrorKind::NoRecordedForward, "backward called without a recorded forward pass");
        }
        const auto& lv = value(loss);
        if (lv.rows() != 1 || lv.cols() != 1) {
            throw Error(ErrorKind::ShapeMismatch, "backward target must be a scalar");
        }
        for (auto& n : nodes_) {
            if (!n.grad.empty()) {
                std::fill(n.grad.data().begin(), n.grad.data().end(), 0.0);
            }
        }
        grad_buffer(loss)(0, 0) = 1.0;
        for (std::size_t i = loss + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (n.requires_grad && n.backward && !n.grad.empty()) {
                n.backward(*this, i);
            }
        }
    }

private:
    struct Node {
        Matrix owned;
        const Matrix* external = nullptr;
        Matrix grad;
        bool requires_grad = false;
        Backward backward;
    };
    std::vector<Node> nodes_;
};

/** `x * W^T` */
inline Var matmul_t(Tape& t, Var x, Var w) {
    return t.record(detail::matmul_nt(t.value(x), t.value(w)), {x, w}, [x, w](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        if (t.requires_grad(x)) {
            detail::matmul_nn_acc(g, t.value(w), t.grad_buffer(x));
        }
        if (t.requires_grad(w)) {
            detail::matmul_tn_acc(g, t.value(x), t.grad_buffer(w));
        }
    });
}

/** Row-broadcast addition of a 1 x c bias. */
inline Var add_bias(Tape& t, Var x, Var b) {
    const Matrix& xv = t.value(x);
    const Matrix& bv = t.value(b);
    detail::check(bv.rows() == 1 && bv.cols() == xv.cols(), "add_bias: bias width does not match");
    Matrix out = xv;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto row = out.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] += bv(0, j);
        }
    }
    return t.record(std::move(out), {x, b}, [x, b](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        if (t.requires_grad(x)) {
            auto& gx = t.grad_buffer(x);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx.data()[i] += g.data()[i];
            }
        }
        if (t.requires_grad(b)) {
            auto& gb = t.grad_buffer(b);
            for (std::size_t i = 0; i < g.rows(); ++i) {
                for (std::size_t j = 0; j < g.cols(); ++j) {
                    gb(0, j) += g(i, j);
                }
            }
        }
    });
}

inline Var add(Tape& t, Var a, Var b) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    detail::check(av.same_shape(bv), "add: shapes differ");
    Matrix out = av;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] += bv.data()[i];
    }
    return t.record(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        for (Var v : {a, b}) {
            if (t.requires_grad(v)) {
                auto& gv = t.grad_buffer(v);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gv.data()[i] += g.data()[i];
                }
            }
        }
    });
}

/** Add a constant matrix of the same shape. */
inline Var add_constant(Tape& t, Var x, const Matrix& c) {
    detail::check(t.value(x).same_shape(c), "add_constant: shapes differ");
    Matrix out = t.value(x);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] += c.data()[i];
    }
    return t.record(std::move(out), {x}, [x](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        auto& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx.data()[i] += g.data()[i];
        }
    });
}

inline double elu_value(double x) { return x >= 0 ? x : std::expm1(x); }

/** ELU with alpha = 1. */
inline Var elu(Tape& t, Var x) {
    Matrix out = t.value(x);
    for (auto& v : out.data()) {
        v = elu_value(v);
    }
    return t.record(std::move(out), {x}, [x](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& xv = t.value(x);
        auto& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double in = xv.data()[i];
            gx.data()[i] += g.data()[i] * (in >= 0 ? 1.0 : std::exp(in));
        }
    });
}

inline Var tanh(Tape& t, Var x) {
    Matrix out = t.value(x);
    for (auto& v : out.data()) {
        v = std::tanh(v);
    }
    return t.record(std::move(out), {x}, [x](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& y = t.value(self);
        auto& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double yv = y.data()[i];
            gx.data()[i] += g.data()[i] * (1.0 - yv * yv);
        }
    });
}

/** `A * h` for a fixed sparse operator. */
inline Var propagate(Tape& t, Var h, std::shared_ptr<const SparseOperator> op) {
    Matrix out = op->apply(t.value(h));
    return t.record(std::move(out), {h}, [h, op](Tape& t, Var self) {
        op->apply_transpose_acc(t.grad(self), t.grad_buffer(h));
    });
}

inline Var gather_rows(Tape& t, Var h, std::vector<std::size_t> rows) {
    const Matrix& hv = t.value(h);
    Matrix out(rows.size(), hv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        detail::check(rows[i] < hv.rows(), "gather_rows: index out of range");
        auto src = hv.row(rows[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return t.record(std::move(out), {h}, [h, rows = std::move(rows)](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        auto& gh = t.grad_buffer(h);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            auto grow = g.row(i);
            auto orow = gh.row(rows[i]);
            for (std::size_t c = 0; c < grow.size(); ++c) {
                orow[c] += grow[c];
            }
        }
    });
}

/** `out(i, j) = h(i, j) * s(i, 0)` */
inline Var scale_rows(Tape& t, Var h, Var s) {
    const Matrix& hv = t.value(h);
    const Matrix& sv = t.value(s);
    detail::check(sv.rows() == hv.rows() && sv.cols() == 1, "scale_rows: gate must be n x 1");
    Matrix out = hv;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        for (auto& v : out.row(i)) {
            v *= sv(i, 0);
        }
    }
    return t.record(std::move(out), {h, s}, [h, s](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& hv = t.value(h);
        const Matrix& sv = t.value(s);
        if (t.requires_grad(h)) {
            auto& gh = t.grad_buffer(h);
            for (std::size_t i = 0; i < g.rows(); ++i) {
                for (std::size_t j = 0; j < g.cols(); ++j) {
                    gh(i, j) += g(i, j) * sv(i, 0);
                }
            }
        }
        if (t.requires_grad(s)) {
            auto& gs = t.grad_buffer(s);
            for (std::size_t i = 0; i < g.rows(); ++i) {
                double acc = 0;
                for (std::size_t j = 0; j < g.cols(); ++j) {
                    acc += g(i, j) * hv(i, j);
                }
                gs(i, 0) += acc;
            }
        }
    });
}

/** Column means, as a 1 x c row. */
inline Var mean_rows(Tape& t, Var h) {
    const Matrix& hv = t.value(h);
    detail::check(hv.rows() > 0, "mean_rows: empty input");
    Matrix out(1, hv.cols());
    for (std::size_t i = 0; i < hv.rows(); ++i) {
        for (std::size_t j = 0; j < hv.cols(); ++j) {
            out(0, j) += hv(i, j);
        }
    }
    const double n = static_cast<double>(hv.rows());
    for (auto& v : out.data()) {
        v /= n;
    }
    return t.record(std::move(out), {h}, [h](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        auto& gh = t.grad_buffer(h);
        const double n = static_cast<double>(gh.rows());
        for (std::size_t i = 0; i < gh.rows(); ++i) {
            for (std::size_t j = 0; j < gh.cols(); ++j) {
                gh(i, j) += g(0, j) / n;
            }
        }
    });
}

inline Var sum_squares(Tape& t, Var x) {
    double s = 0;
    for (double v : t.value(x).data()) {
        s += v * v;
    }
    return t.record(Matrix(1, 1, s), {x}, [x](Tape& t, Var self) {
        const double g = t.grad(self)(0, 0);
        const Matrix& xv = t.value(x);
        auto& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < xv.size(); ++i) {
            gx.data()[i] += 2.0 * g * xv.data()[i];
        }
    });
}

/** Mean squared error against a constant target of the same shape. */
inline Var mse(Tape& t, Var pred, const Matrix& target) {
    const Matrix& pv = t.value(pred);
    detail::check(pv.same_shape(target), "mse: prediction and target shapes differ");
    double s = 0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double d = pv.data()[i] - target.data()[i];
        s += d * d;
    }
    const double n = static_cast<double>(pv.size());
    return t.record(Matrix(1, 1, s / n), {pred}, [pred, target, n](Tape& t, Var self) {
        const double g = t.grad(self)(0, 0);
        const Matrix& pv = t.value(pred);
        auto& gp = t.grad_buffer(pred);
        for (std::size_t i = 0; i < pv.size(); ++i) {
            gp.data()[i] += g * 2.0 * (pv.data()[i] - target.data()[i]) / n;
        }
    });
}

/** Fully connected layer `x * W^T + b`. */
inline Var linear(Tape& t, Var x, Var weight, Var bias) {
    return add_bias(t, matmul_t(t, x, weight), bias);
}

/** `D^-1/2 (A + I) D^-1/2 * H * W^T` */
inline Var gcn_conv(Tape& t, Var h, std::shared_ptr<const SparseOperator> normalized, Var weight) {
    return matmul_t(t, propagate(t, h, std::move(normalized)), weight);
}

inline Var gcn_conv(Tape& t, Var h, const std::vector<std::pair<std::size_t, std::size_t>>& edges, Var weight) {
    auto op = std::make_shared<const SparseOperator>(gcn_normalized(t.value(h).rows(), edges));
    return gcn_conv(t, h, op, weight);
}

/** `out_i = W1 h_i + W2 sum_{j in N(i)} h_j + b` */
inline Var graph_conv(Tape& t, Var h, std::shared_ptr<const SparseOperator> adjacency, Var root_weight, Var neighbor_weight, Var bias) {
    auto self_term = matmul_t(t, h, root_weight);
    auto neighbor_term = matmul_t(t, propagate(t, h, std::move(adjacency)), neighbor_weight);
    return add_bias(t, add(t, self_term, neighbor_term), bias);
}

inline Var graph_conv(Tape& t, Var h, const std::vector<std::pair<std::size_t, std::size_t>>& edges, Var root_weight, Var neighbor_weight, Var bias) {
    auto op = std::make_shared<const SparseOperator>(neighbor_sum(t.value(h).rows(), edges));
    return graph_conv(t, h, op, root_weight, neighbor_weight, bias);
}

/**
 * Indices of the `ceil(ratio * n)` highest scores, highest first; equal scores prefer the lower index.
 */
inline std::vector<std::size_t> top_k_indices(const Matrix& scores, double ratio) {
    const std::size_t n = scores.rows();
    std::size_t k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n)));
    k = std::clamp<std::size_t>(k, 1, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores(a, 0) > scores(b, 0); });
    order.resize(k);
    return order;
}

/**
 * Self-attention pooling readout: score nodes with a one-channel GCN, keep the top fraction,
 * gate kept rows by `tanh(score)` and average them.
 *
 * The selected node set is treated as constant when differentiating.
 */
inline Var sag_pool_readout(Tape& t, Var h, std::shared_ptr<const SparseOperator> normalized, Var score_weight, double ratio) {
    auto score = gcn_conv(t, h, std::move(normalized), score_weight);
    auto keep = top_k_indices(t.value(score), ratio);
    auto kept_h = gather_rows(t, h, keep);
    auto gate = tanh(t, gather_rows(t, score, keep));
    return mean_rows(t, scale_rows(t, kept_h, gate));
}

inline Var sag_pool_readout(Tape& t, Var h, const std::vector<std::pair<std::size_t, std::size_t>>& edges, Var score_weight, double ratio) {
    auto op = std::make_shared<const SparseOperator>(gcn_normalized(t.value(h).rows(), edges));
    return sag_pool_readout(t, h, op, score_weight, ratio);
}

inline Var global_mean_readout(Tape& t, Var h) {
    return mean_rows(t, h);
}

enum class Operator { gcn, graphconv };
enum class Pooling { sag_mean, global_mean };

inline const char* to_string(Operator o) { return o == Operator::gcn ? "gcn" : "graphconv"; }
inline const char* to_string(Pooling p) { return p == Pooling::sag_mean ? "sag_mean" : "global_mean"; }

inline std::optional<Operator> parse_operator(const std::string& s) {
    if (s == "gcn") return Operator::gcn;
    if (s == "graphconv") return Operator::graphconv;
    return std::nullopt;
}

inline std::optional<Pooling> parse_pooling(const std::string& s) {
    if (s == "sag_mean") return Pooling::sag_mean;
    if (s == "global_mean") return Pooling::global_mean;
    return std::nullopt;
}

/**
 * @brief Architecture of the spatial module.
 *
 * Node features pass through the pre-MLP (per node), the GNN stack, the readout and the post-MLP.
 * Width lists hold the output width of each layer; the last layer of the whole chain must output `n_genes`.
 */
struct ModelSpec {
    std::size_t input_width = 0;
    std::vector<std::size_t> pre_mlp;
    Operator op = Operator::gcn;
    std::vector<std::size_t> gnn;
    Pooling pooling = Pooling::sag_mean;
    double sag_ratio = 0.5;
    std::vector<std::size_t> post_mlp;
    std::size_t n_genes = 0;

    std::size_t gnn_input_width() const { return pre_mlp.empty() ? input_width : pre_mlp.back(); }
    std::size_t readout_width() const { return gnn.back(); }
    std::size_t output_width() const { return post_mlp.empty() ? gnn.back() : post_mlp.back(); }

    void validate() const {
        if (input_width == 0 || n_genes == 0) {
            throw Error(ErrorKind::InvalidConfig, "model input width and gene count must be positive");
        }
        if (gnn.empty()) {
            throw Error(ErrorKind::InvalidConfig, "at least one graph layer is required");
        }
        for (auto w : pre_mlp) if (w == 0) throw Error(ErrorKind::InvalidConfig, "zero-width pre-MLP layer");
        for (auto w : gnn) if (w == 0) throw Error(ErrorKind::InvalidConfig, "zero-width graph layer");
        for (auto w : post_mlp) if (w == 0) throw Error(ErrorKind::InvalidConfig, "zero-width post-MLP layer");
        if (!(sag_ratio > 0 && sag_ratio <= 1)) {
            throw Error(ErrorKind::InvalidConfig, "SAG pooling ratio must lie in (0, 1]");
        }
        if (output_width() != n_genes) {
            throw Error(ErrorKind::ShapeMismatch, "model output width " + std::to_string(output_width()) + " does not equal the gene count " + std::to_string(n_genes));
        }
    }

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct Parameter {
    std::string name;
    Matrix value;

    friend bool operator==(const Parameter&, const Parameter&) = default;
};

/**
 * @brief Trainable parameters of the spatial module, in a fixed layout determined by the `ModelSpec`.
 */
struct ModelState {
    ModelSpec spec;
    std::vector<Parameter> params;
    std::uint64_t seed = 0;

    const Matrix& operator[](const std::string& name) const {
        for (const auto& p : params) {
            if (p.name == name) {
                return p.value;
            }
        }
        throw Error(ErrorKind::ShapeMismatch, "no parameter named '" + name + "'");
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& p : params) {
            n += p.value.size();
        }
        return n;
    }

    friend bool operator==(const ModelState&, const ModelState&) = default;
};

namespace detail {

inline Matrix glorot(std::size_t out, std::size_t in, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    Matrix m(out, in);
    for (auto& v : m.data()) {
        v = rng.uniform(-limit, limit);
    }
    return m;
}

}

/**
 * Glorot-uniform weights and zero biases, seeded.
 *
 * The map that produces the correction is zero-initialized (the last post-MLP layer; else the SAG scorer;
 * else the last graph layer), so an untrained module outputs exactly zero.
 */
inline ModelState init_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    ModelState state;
    state.spec = spec;
    state.seed = seed;
    auto push = [&](std::string name, Matrix m) { state.params.push_back({std::move(name), std::move(m)}); };

    std::size_t width = spec.input_width;
    for (std::size_t i = 0; i < spec.pre_mlp.size(); ++i) {
        push("pre." + std::to_string(i) + ".weight", detail::glorot(spec.pre_mlp[i], width, rng));
        push("pre." + std::to_string(i) + ".bias", Matrix(1, spec.pre_mlp[i]));
        width = spec.pre_mlp[i];
    }
    const bool zero_last_gnn = spec.post_mlp.empty() && spec.pooling == Pooling::global_mean;
    for (std::size_t i = 0; i < spec.gnn.size(); ++i) {
        const bool zero = zero_last_gnn && i + 1 == spec.gnn.size();
        auto make = [&](std::size_t out, std::size_t in) { return zero ? Matrix(out, in) : detail::glorot(out, in, rng); };
        const auto prefix = "gnn." + std::to_string(i);
        if (spec.op == Operator::gcn) {
            push(prefix + ".weight", make(spec.gnn[i], width));
        } else {
            push(prefix + ".root_weight", make(spec.gnn[i], width));
            push(prefix + ".neighbor_weight", make(spec.gnn[i], width));
        }
        push(prefix + ".bias", Matrix(1, spec.gnn[i]));
        width = spec.gnn[i];
    }
    if (spec.pooling == Pooling::sag_mean) {
        push("pool.score_weight", spec.post_mlp.empty() ? Matrix(1, width) : detail::glorot(1, width, rng));
    }
    for (std::size_t i = 0; i < spec.post_mlp.size(); ++i) {
        const bool zero = i + 1 == spec.post_mlp.size();
        push("post." + std::to_string(i) + ".weight", zero ? Matrix(spec.post_mlp[i], width) : detail::glorot(spec.post_mlp[i], width, rng));
        push("post." + std::to_string(i) + ".bias", Matrix(1, spec.post_mlp[i]));
        width = spec.post_mlp[i];
    }
    return state;
}

/**
 * Put every parameter of `state` on the tape, in layout order.
 */
inline std::vector<Var> bind(Tape& t, const ModelState& state) {
    std::vector<Var> vars;
    vars.reserve(state.params.size());
    for (const auto& p : state.params) {
        vars.push_back(t.parameter(p.value));
    }
    return vars;
}

/**
 * Spatial correction for one graph, as a 1 x n_genes row.
 *
 * ELU follows every pre-MLP layer, every graph layer (including the last) and every post-MLP layer except the last.
 */
inline Var spatial_forward(Tape& t, const ModelState& state, const std::vector<Var>& params, const SpotGraph& graph) {
    const auto& spec = state.spec;
    if (graph.features.cols() != spec.input_width) {
        throw Error(ErrorKind::ShapeMismatch, "graph feature width " + std::to_string(graph.features.cols()) + " does not match model input " + std::to_string(spec.input_width));
    }
    if (params.size() != state.params.size()) {
        throw Error(ErrorKind::ShapeMismatch, "parameter binding does not match the model");
    }
    std::size_t p = 0;
    Var h = t.constant(graph.features);
    for (std::size_t i = 0; i < spec.pre_mlp.size(); ++i, p += 2) {
        h = elu(t, linear(t, h, params[p], params[p + 1]));
    }

    const std::size_t n = graph.n_nodes();
    std::shared_ptr<const SparseOperator> normalized;
    if (spec.op == Operator::gcn || spec.pooling == Pooling::sag_mean) {
        normalized = std::make_shared<const SparseOperator>(gcn_normalized(n, graph.edges));
    }
    std::shared_ptr<const SparseOperator> adjacency;
    if (spec.op == Operator::graphconv) {
        adjacency = std::make_shared<const SparseOperator>(neighbor_sum(n, graph.edges));
    }

    for (std::size_t i = 0; i < spec.gnn.size(); ++i) {
        if (spec.op == Operator::gcn) {
            h = add_bias(t, gcn_conv(t, h, normalized, params[p]), params[p + 1]);
            p += 2;
        } else {
            h = graph_conv(t, h, adjacency, params[p], params[p + 1], params[p + 2]);
            p += 3;
        }
        h = elu(t, h);
    }

    if (spec.pooling == Pooling::sag_mean) {
        h = sag_pool_readout(t, h, normalized, params[p], spec.sag_ratio);
        ++p;
    } else {
        h = global_mean_readout(t, h);
    }

    for (std::size_t i = 0; i < spec.post_mlp.size(); ++i, p += 2) {
        h = linear(t, h, params[p], params[p + 1]);
        if (i + 1 < spec.post_mlp.size()) {
            h = elu(t, h);
        }
    }
    return h;
}

/** Forward evaluation without gradient bookkeeping. */
inline std::vector<double> spatial_forward(const ModelState& state, const SpotGraph& graph) {
    Tape t;
    std::vector<Var> vars;
    for (const auto& p : state.params) {
        vars.push_back(t.constant(p.value));
    }
    const auto& out = t.value(spatial_forward(t, state, vars, graph));
    return out.data();
}

/**
 * @brief The linear head mapping an embedding to a local delta prediction.
 */
struct LinearHead {
    Matrix weight; // n_genes x d_emb
    Matrix bias;   // 1 x n_genes

    std::size_t d_emb() const { return weight.cols(); }
    std::size_t n_genes() const { return weight.rows(); }

    Matrix predict(const Matrix& embeddings) const { return linear_apply(embeddings, weight, bias); }

    friend bool operator==(const LinearHead&, const LinearHead&) = default;
};

inline LinearHead init_head(std::size_t d_emb, std::size_t n_genes, std::uint64_t seed) {
    if (d_emb == 0 || n_genes == 0) {
        throw Error(ErrorKind::EmptySplit, "linear head needs positive embedding width and gene count");
    }
    Rng rng(seed);
    return LinearHead{detail::glorot(n_genes, d_emb, rng), Matrix(1, n_genes)};
}

inline std::string join_widths(const std::vector<std::size_t>& widths) {
    std::string out;
    for (std::size_t i = 0; i < widths.size(); ++i) {
        if (i) {
            out += ',';
        }
        out += std::to_string(widths[i]);
    }
    return out.empty() ? "-" : out;
}

inline std::vector<std::size_t> parse_widths(const std::string& text) {
    std::vector<std::size_t> out;
    if (text.empty() || text == "-") {
        return out;
    }
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find(',', start);
        auto piece = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
        std::size_t value = 0;
        auto res = std::from_chars(piece.data(), piece.data() + piece.size(), value);
        if (res.ec != std::errc() || res.ptr != piece.data() + piece.size() || piece.empty()) {
            throw Error(ErrorKind::InvalidConfig, "invalid width list '" + text + "'");
        }
        out.push_back(value);
        if (end == std::string::npos) {
            break;
        }
        start = end + 1;
    }
    return out;
}

/**
 * Pack a head and (optionally) a spatial module into a checkpoint.
 */
inline Checkpoint to_checkpoint(const LinearHead& head, const ModelState* spatial, std::vector<std::pair<std::string, std::string>> meta = {}) {
    Checkpoint ck;
    ck.meta = std::move(meta);
    ck.meta.emplace_back("has_spatial", spatial ? "1" : "0");
    ck.tensors.emplace_back("head.weight", head.weight);
    ck.tensors.emplace_back("head.bias", head.bias);
    if (spatial) {
        const auto& s = spatial->spec;
        ck.meta.emplace_back("spec.input_width", std::to_string(s.input_width));
        ck.meta.emplace_back("spec.pre_mlp", join_widths(s.pre_mlp));
        ck.meta.emplace_back("spec.operator", to_string(s.op));
        ck.meta.emplace_back("spec.gnn", join_widths(s.gnn));
        ck.meta.emplace_back("spec.pooling", to_string(s.pooling));
        ck.meta.emplace_back("spec.sag_ratio", format_real(s.sag_ratio));
        ck.meta.emplace_back("spec.post_mlp", join_widths(s.post_mlp));
        ck.meta.emplace_back("spec.n_genes", std::to_string(s.n_genes));
        ck.meta.emplace_back("spec.seed", std::to_string(spatial->seed));
        for (const auto& p : spatial->params) {
            ck.tensors.emplace_back("spatial." + p.name, p.value);
        }
    }
    return ck;
}

struct Restored {
    LinearHead head;
    std::optional<ModelState> spatial;
};

inline Restored from_checkpoint(const Checkpoint& ck) {
    auto tensor = [&](const std::string& name) -> const Matrix& {
        for (const auto& [n, t] : ck.tensors) {
            if (n == name) {
                return t;
            }
        }
        throw Error(ErrorKind::MalformedRow, "checkpoint is missing tensor '" + name + "'");
    };
    auto meta = [&](const std::string& key) -> std::string {
        const auto* v = ck.find_meta(key);
        if (!v) {
            throw Error(ErrorKind::MalformedRow, "checkpoint is missing metadata '" + key + "'");
        }
        return *v;
    };
    Restored out;
    out.head.weight = tensor("head.weight");
    out.head.bias = tensor("head.bias");
    if (meta("has_spatial") == "1") {
        ModelSpec s;
        s.input_width = std::stoul(meta("spec.input_width"));
        s.pre_mlp = parse_widths(meta("spec.pre_mlp"));
        auto op = parse_operator(meta("spec.operator"));
        auto pool = parse_pooling(meta("spec.pooling"));
        if (!op || !pool) {
            throw Error(ErrorKind::MalformedRow, "checkpoint has an unknown operator or pooling");
        }
        s.op = *op;
        s.pooling = *pool;
        s.sag_ratio = ::sepal::detail::parse_real(meta("spec.sag_ratio"), "checkpoint", 0);
        s.gnn = parse_widths(meta("spec.gnn"));
        s.post_mlp = parse_widths(meta("spec.post_mlp"));
        s.n_genes = std::stoul(meta("spec.n_genes"));
        auto state = init_model(s, std::stoull(meta("spec.seed")));
        for (auto& p : state.params) {
            const auto& t = tensor("spatial." + p.name);
            if (!t.same_shape(p.value)) {
                throw Error(ErrorKind::ShapeMismatch, "checkpoint tensor '" + p.name + "' has the wrong shape");
            }
            p.value = t;
        }
        out.spatial = std::move(state);
    }
    return out;
}

}

#endif
