#ifndef SEPAL_TRAIN_HPP
#define SEPAL_TRAIN_HPP

#include "core.hpp"
#include "graphs.hpp"
#include "ingest.hpp"
#include "nn.hpp"
#include "preprocess.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

/**
 * @file train.hpp
 *
 * @brief Two-stage training: a linear head on embeddings, then a spatial correction module on top of the frozen head.
 */

namespace sepal {

/**
 * @brief Optimization settings shared by both stages.
 */
struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t batch_size = 256;
    std::size_t max_epochs = 100;
    std::size_t max_steps = 0; // 0 means no step limit
    std::size_t patience = 10;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int threads = 1;

    void validate() const {
        if (!(learning_rate >= 0) || batch_size == 0 || max_epochs == 0 || patience == 0) {
            throw Error(ErrorKind::InvalidConfig, "learning rate must be nonnegative and batch size, epochs, patience positive");
        }
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && epsilon > 0)) {
            throw Error(ErrorKind::InvalidConfig, "invalid Adam hyperparameters");
        }
    }
};

/**
 * @brief Adam with bias correction.
 */
class Adam {
public:
    Adam(std::vector<Matrix*> params, const TrainConfig& cfg) :
        params_(std::move(params)), lr_(cfg.learning_rate), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.epsilon)
    {
        for (auto* p : params_) {
            m_.emplace_back(p->rows(), p->cols());
            v_.emplace_back(p->rows(), p->cols());
        }
    }

    void step(const std::vector<Matrix>& grads) {
        if (grads.size() != params_.size()) {
            throw Error(ErrorKind::ShapeMismatch, "one gradient per parameter is required");
        }
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k]->data();
            auto& m = m_[k].data();
            auto& v = v_[k].data();
            const auto& g = grads[k].data();
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = beta1_ * m[i] + (1 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1 - beta2_) * g[i] * g[i];
                const double mhat = m[i] / c1, vhat = v[i] / c2;
                p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    std::size_t steps() const { return t_; }

private:
    std::vector<Matrix*> params_;
    std::vector<Matrix> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

/**
 * Mean of squared differences over every cell.
 */
inline double mean_squared_error(const Matrix& pred, const Matrix& target) {
    if (!pred.same_shape(target) || pred.empty()) {
        throw Error(ErrorKind::ShapeMismatch, "prediction and target shapes differ");
    }
    double s = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred.data()[i] - target.data()[i];
        s += d * d;
    }
    return s / static_cast<double>(pred.size());
}

struct HistoryRow {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double train_mse = 0;
    double val_mse = 0;
    double wall_seconds = 0;
};

inline void write_history(const std::string& path, const std::vector<HistoryRow>& history) {
    Table t{"training_history", {"epoch", "step", "train_mse", "val_mse", "wall_seconds"}, {}};
    for (const auto& h : history) {
        t.rows.push_back({std::to_string(h.epoch), std::to_string(h.step), format_real(h.train_mse), format_real(h.val_mse), format_real(h.wall_seconds)});
    }
    write_table(path, t);
}

/**
 * @brief Embeddings and delta targets for the train and validation spots.
 */
struct Stage1Data {
    Matrix train_x, train_y;
    Matrix val_x, val_y;
};

struct Stage1Result {
    nn::LinearHead head;
    std::vector<HistoryRow> history;
    std::vector<double> step_losses;
    double best_val_mse = 0;
    std::size_t best_epoch = 0;
};

namespace detail {

inline void check_split(const Matrix& x, const Matrix& y, const char* which) {
    if (x.rows() == 0 || y.cols() == 0) {
        throw Error(ErrorKind::EmptySplit, std::string(which) + " split has no spots or no genes");
    }
    if (x.rows() != y.rows()) {
        throw Error(ErrorKind::ShapeMismatch, std::string(which) + " inputs and targets have different spot counts");
    }
}

inline Matrix take_rows(const Matrix& m, std::span<const std::size_t> rows) {
    Matrix out(rows.size(), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto src = m.row(rows[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

inline double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline void check_finite(double loss, std::size_t step) {
    if (!std::isfinite(loss)) {
        throw Error(ErrorKind::DivergedLoss, "loss became non-finite at step " + std::to_string(step));
    }
}

}

/**
 * Fit the linear head to delta targets with Adam, keeping the epoch with the lowest validation MSE.
 */
inline Stage1Result stage1_train(const Stage1Data& data, const TrainConfig& cfg) {
    cfg.validate();
    detail::check_split(data.train_x, data.train_y, "train");
    detail::check_split(data.val_x, data.val_y, "validation");
    if (data.train_x.cols() != data.val_x.cols() || data.train_y.cols() != data.val_y.cols()) {
        throw Error(ErrorKind::ShapeMismatch, "train and validation widths differ");
    }
    const auto start = std::chrono::steady_clock::now();

    Stage1Result result;
    nn::LinearHead head = nn::init_head(data.train_x.cols(), data.train_y.cols(), cfg.seed);
    Adam adam({&head.weight, &head.bias}, cfg);
    nn::Rng rng(cfg.seed ^ 0x5eedULL);

    result.best_val_mse = mean_squared_error(head.predict(data.val_x), data.val_y);
    result.head = head;
    result.history.push_back({0, 0, mean_squared_error(head.predict(data.train_x), data.train_y), result.best_val_mse, detail::seconds_since(start)});

    std::vector<std::size_t> order(data.train_x.rows());
    std::iota(order.begin(), order.end(), 0);
    std::size_t since_best = 0;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0;
        std::size_t batches = 0;
        bool out_of_steps = false;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            std::span<const std::size_t> idx(order.data() + b, std::min(cfg.batch_size, order.size() - b));
            nn::Tape t;
            auto x = t.constant(detail::take_rows(data.train_x, idx));
            auto w = t.parameter(head.weight);
            auto bias = t.parameter(head.bias);
            auto loss = nn::mse(t, nn::linear(t, x, w, bias), detail::take_rows(data.train_y, idx));
            const double lv = t.value(loss)(0, 0);
            detail::check_finite(lv, adam.steps());
            t.backward(loss);
            adam.step({t.grad(w), t.grad(bias)});
            result.step_losses.push_back(lv);
            epoch_loss += lv;
            ++batches;
            if (cfg.max_steps && adam.steps() >= cfg.max_steps) {
                out_of_steps = true;
                break;
            }
        }

        const double val = mean_squared_error(head.predict(data.val_x), data.val_y);
        detail::check_finite(val, adam.steps());
        result.history.push_back({epoch, adam.steps(), epoch_loss / static_cast<double>(batches), val, detail::seconds_since(start)});
        if (val < result.best_val_mse) {
            result.best_val_mse = val;
            result.best_epoch = epoch;
            result.head = head;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
        if (out_of_steps) {
            break;
        }
    }
    return result;
}

/**
 * @brief Graphs, frozen local predictions and delta targets for the train and validation spots.
 *
 * Row `i` of `*_local` and `*_y` belongs to graph `i`.
 */
struct Stage2Data {
    std::vector<SpotGraph> train_graphs;
    Matrix train_local, train_y;
    std::vector<SpotGraph> val_graphs;
    Matrix val_local, val_y;
};

struct Stage2Result {
    nn::ModelState state;
    std::vector<HistoryRow> history;
    std::vector<double> step_losses;
    double initial_val_mse = 0;
    double best_val_mse = 0;
    std::size_t best_epoch = 0;
};

/**
 * Delta predictions `s + local` for a list of graphs.
 */
inline Matrix predict_delta(const nn::ModelState& state, const std::vector<SpotGraph>& graphs, const Matrix& local, int threads = 1) {
    if (local.rows() != graphs.size() || local.cols() != state.spec.n_genes) {
        throw Error(ErrorKind::ShapeMismatch, "local predictions do not match the graph list");
    }
    Matrix out(graphs.size(), state.spec.n_genes);
    parallel_for(graphs.size(), threads, [&](std::size_t i) {
        auto s = nn::spatial_forward(state, graphs[i]);
        auto row = out.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] = s[j] + local(i, j);
        }
    });
    return out;
}

/**
 * Fit the spatial module so that `s + local` matches the delta targets, with the head held fixed.
 *
 * Each batch averages the per-graph losses. With `threads > 1` the batch is split into contiguous
 * chunks whose gradients are merged in chunk order.
 */
inline Stage2Result stage2_train(const Stage2Data& data, const nn::ModelSpec& spec, const TrainConfig& cfg) {
    cfg.validate();
    spec.validate();
    if (data.train_graphs.empty() || data.val_graphs.empty()) {
        throw Error(ErrorKind::EmptySplit, "stage 2 needs train and validation graphs");
    }
    detail::check_split(data.train_local, data.train_y, "train");
    detail::check_split(data.val_local, data.val_y, "validation");
    if (data.train_local.rows() != data.train_graphs.size() || data.val_local.rows() != data.val_graphs.size() ||
        data.train_y.cols() != spec.n_genes || data.val_y.cols() != spec.n_genes ||
        !data.train_local.same_shape(data.train_y) || !data.val_local.same_shape(data.val_y)) {
        throw Error(ErrorKind::ShapeMismatch, "stage 2 data does not match the model spec");
    }
    const auto start = std::chrono::steady_clock::now();

    Stage2Result result;
    nn::ModelState state = nn::init_model(spec, cfg.seed);
    std::vector<Matrix*> pointers;
    for (auto& p : state.params) {
        pointers.push_back(&p.value);
    }
    Adam adam(pointers, cfg);
    nn::Rng rng(cfg.seed ^ 0x5eedULL);

    auto evaluate = [&](const std::vector<SpotGraph>& graphs, const Matrix& local, const Matrix& y) {
        return mean_squared_error(predict_delta(state, graphs, local, cfg.threads), y);
    };

    result.initial_val_mse = evaluate(data.val_graphs, data.val_local, data.val_y);
    result.best_val_mse = result.initial_val_mse;
    result.state = state;
    result.history.push_back({0, 0, evaluate(data.train_graphs, data.train_local, data.train_y), result.initial_val_mse, detail::seconds_since(start)});

    const std::size_t n_params = state.params.size();
    auto zero_grads = [&]() {
        std::vector<Matrix> g;
        for (const auto& p : state.params) {
            g.emplace_back(p.value.rows(), p.value.cols());
        }
        return g;
    };

    std::vector<std::size_t> order(data.train_graphs.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t since_best = 0;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0;
        std::size_t batches = 0;
        bool out_of_steps = false;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            const std::size_t bsize = std::min(cfg.batch_size, order.size() - b);
            const std::size_t chunks = static_cast<std::size_t>(std::max(1, std::min<int>(cfg.threads, static_cast<int>(bsize))));
            const std::size_t per_chunk = (bsize + chunks - 1) / chunks;
            std::vector<std::vector<Matrix>> chunk_grads(chunks);
            std::vector<double> chunk_loss(chunks, 0);

            parallel_for(chunks, cfg.threads, [&](std::size_t c) {
                auto grads = zero_grads();
                double loss_sum = 0;
                const std::size_t lo = c * per_chunk, hi = std::min(bsize, lo + per_chunk);
                for (std::size_t k = lo; k < hi; ++k) {
                    const std::size_t gi = order[b + k];
                    nn::Tape t;
                    auto vars = nn::bind(t, state);
                    auto s = nn::spatial_forward(t, state, vars, data.train_graphs[gi]);
                    Matrix local(1, spec.n_genes), target(1, spec.n_genes);
                    for (std::size_t j = 0; j < spec.n_genes; ++j) {
                        local(0, j) = data.train_local(gi, j);
                        target(0, j) = data.train_y(gi, j);
                    }
                    auto loss = nn::mse(t, nn::add_constant(t, s, local), target);
                    loss_sum += t.value(loss)(0, 0);
                    t.backward(loss);
                    for (std::size_t p = 0; p < n_params; ++p) {
                        const auto& g = t.grad(vars[p]);
                        auto& acc = grads[p].data();
                        for (std::size_t i = 0; i < acc.size(); ++i) {
                            acc[i] += g.data()[i];
                        }
                    }
                }
                chunk_grads[c] = std::move(grads);
                chunk_loss[c] = loss_sum;
            });

            auto grads = zero_grads();
            double loss_sum = 0;
            for (std::size_t c = 0; c < chunks; ++c) {
                for (std::size_t p = 0; p < n_params; ++p) {
                    auto& acc = grads[p].data();
                    const auto& g = chunk_grads[c][p].data();
                    for (std::size_t i = 0; i < acc.size(); ++i) {
                        acc[i] += g[i];
                    }
                }
                loss_sum += chunk_loss[c];
            }
            const double scale = 1.0 / static_cast<double>(bsize);
            for (auto& g : grads) {
                for (auto& v : g.data()) {
                    v *= scale;
                }
            }
            const double lv = loss_sum * scale;
            detail::check_finite(lv, adam.steps());
            adam.step(grads);
            result.step_losses.push_back(lv);
            epoch_loss += lv;
            ++batches;
            if (cfg.max_steps && adam.steps() >= cfg.max_steps) {
                out_of_steps = true;
                break;
            }
        }

        const double val = evaluate(data.val_graphs, data.val_local, data.val_y);
        detail::check_finite(val, adam.steps());
        result.history.push_back({epoch, adam.steps(), epoch_loss / static_cast<double>(batches), val, detail::seconds_since(start)});
        if (val < result.best_val_mse) {
            result.best_val_mse = val;
            result.best_epoch = epoch;
            result.state = state;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
        if (out_of_steps) {
            break;
        }
    }
    return result;
}

/**
 * Final expression estimates `s + local + train_mean` for the spots of one slide.
 *
 * @param state Spatial module, or null for head-only predictions.
 */
inline ExpressionMatrix predict(const nn::LinearHead& head, const nn::ModelState* state, const Slide& slide,
                                const std::vector<SpotGraph>& graphs, const TrainMeanVector& mean, int threads = 1) {
    if (head.n_genes() != mean.means.size() || (state && state->spec.n_genes != mean.means.size())) {
        throw Error(ErrorKind::GeneAlignmentMismatch, "model width does not match the training mean");
    }
    if (head.d_emb() != slide.embeddings.d_emb()) {
        throw Error(ErrorKind::ShapeMismatch, "embedding width does not match the head");
    }
    Matrix local = head.predict(slide.embeddings.vectors);
    Matrix delta = state ? predict_delta(*state, graphs, local, threads) : local;

    ExpressionMatrix out;
    out.slide_id = slide.id();
    out.spot_ids = slide.expression.spot_ids;
    out.gene_ids = mean.gene_ids;
    out.stage = Stage::predicted;
    out.values = from_delta(delta, mean);
    return out;
}

}

#endif
