#ifndef SEPAL_EVAL_HPP
#define SEPAL_EVAL_HPP

#include "core.hpp"
#include "ingest.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <vector>

/**
 * @file eval.hpp
 *
 * @brief Regression metrics that ignore imputed cells, and the figure data derived from them.
 */

namespace sepal {

/**
 * @brief Aggregate metrics plus the per-gene and per-patch values they average.
 *
 * Undefined per-item statistics (zero truth variance, too few unmasked values, or a constant prediction for PCC)
 * are `std::nullopt` and left out of the averages.
 */
struct MetricsReport {
    double mse = 0;
    double mae = 0;
    double pcc_gene = 0;
    double pcc_patch = 0;
    double r2_gene = 0;
    double r2_patch = 0;

    std::vector<std::string> gene_ids;
    std::vector<std::optional<double>> gene_pcc, gene_r2;
    std::vector<std::string> patch_ids;
    std::vector<std::optional<double>> patch_pcc, patch_r2;

    std::size_t excluded_genes = 0;   // zero truth variance or fewer than two unmasked values
    std::size_t excluded_patches = 0;
    std::size_t n_masked = 0;
    std::size_t n_values = 0;
};

namespace detail {

struct PairStats {
    std::optional<double> pcc;
    std::optional<double> r2;
    bool excluded = false;
};

// Exact test; a rounded mean can leave a constant vector with a tiny nonzero sum of squares.
inline bool constant(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

inline PairStats pair_stats(const std::vector<double>& pred, const std::vector<double>& truth) {
    PairStats out;
    const std::size_t n = truth.size();
    if (n < 2) {
        out.excluded = true;
        return out;
    }
    double mp = 0, mt = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mp += pred[i];
        mt += truth[i];
    }
    mp /= static_cast<double>(n);
    mt /= static_cast<double>(n);
    double spp = 0, stt = 0, spt = 0, sres = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dp = pred[i] - mp, dt = truth[i] - mt, r = truth[i] - pred[i];
        spp += dp * dp;
        stt += dt * dt;
        spt += dp * dt;
        sres += r * r;
    }
    if (constant(truth)) {
        out.excluded = true;
        return out;
    }
    out.r2 = 1.0 - sres / stt;
    if (!constant(pred)) {
        out.pcc = std::clamp(spt / (std::sqrt(spp) * std::sqrt(stt)), -1.0, 1.0);
    }
    return out;
}

inline double mean_defined(const std::vector<std::optional<double>>& v) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& x : v) {
        if (x) {
            s += *x;
            ++n;
        }
    }
    return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

inline void check_inputs(const Matrix& pred, const Matrix& truth, const BoolMatrix& mask) {
    if (!pred.same_shape(truth) || !mask.same_shape(truth)) {
        throw Error(ErrorKind::ShapeMismatch, "prediction, truth and mask shapes differ");
    }
}

}

/**
 * MSE and MAE over the cells where `mask` is false.
 */
inline std::pair<double, double> masked_mse_mae(const Matrix& pred, const Matrix& truth, const BoolMatrix& mask) {
    detail::check_inputs(pred, truth, mask);
    double se = 0, ae = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (mask.data()[i]) {
            continue;
        }
        const double d = pred.data()[i] - truth.data()[i];
        se += d * d;
        ae += std::abs(d);
        ++n;
    }
    if (n == 0) {
        throw Error(ErrorKind::AllMasked, "every value is masked");
    }
    return {se / static_cast<double>(n), ae / static_cast<double>(n)};
}

struct ItemMetrics {
    double pcc = 0;
    double r2 = 0;
    std::vector<std::optional<double>> per_item_pcc;
    std::vector<std::optional<double>> per_item_r2;
    std::size_t excluded = 0;
};

/**
 * Per-gene PCC and R2 over unmasked cells (pooling all rows), averaged over genes.
 */
inline ItemMetrics gene_metrics(const Matrix& pred, const Matrix& truth, const BoolMatrix& mask) {
    detail::check_inputs(pred, truth, mask);
    ItemMetrics out;
    std::vector<double> p, t;
    for (std::size_t j = 0; j < truth.cols(); ++j) {
        p.clear();
        t.clear();
        for (std::size_t i = 0; i < truth.rows(); ++i) {
            if (!mask(i, j)) {
                p.push_back(pred(i, j));
                t.push_back(truth(i, j));
            }
        }
        auto st = detail::pair_stats(p, t);
        out.excluded += st.excluded;
        out.per_item_pcc.push_back(st.pcc);
        out.per_item_r2.push_back(st.r2);
    }
    if (out.excluded == truth.cols()) {
        throw Error(ErrorKind::AllGenesExcluded, "no gene has varying unmasked truth values");
    }
    out.pcc = detail::mean_defined(out.per_item_pcc);
    out.r2 = detail::mean_defined(out.per_item_r2);
    return out;
}

/**
 * Per-patch PCC and R2 across the unmasked genes of each spot, averaged over spots.
 */
inline ItemMetrics patch_metrics(const Matrix& pred, const Matrix& truth, const BoolMatrix& mask) {
    detail::check_inputs(pred, truth, mask);
    ItemMetrics out;
    std::vector<double> p, t;
    for (std::size_t i = 0; i < truth.rows(); ++i) {
        p.clear();
        t.clear();
        for (std::size_t j = 0; j < truth.cols(); ++j) {
            if (!mask(i, j)) {
                p.push_back(pred(i, j));
                t.push_back(truth(i, j));
            }
        }
        auto st = detail::pair_stats(p, t);
        out.excluded += st.excluded;
        out.per_item_pcc.push_back(st.pcc);
        out.per_item_r2.push_back(st.r2);
    }
    if (out.excluded == truth.rows()) {
        throw Error(ErrorKind::AllPatchesExcluded, "no patch has varying unmasked truth values");
    }
    out.pcc = detail::mean_defined(out.per_item_pcc);
    out.r2 = detail::mean_defined(out.per_item_r2);
    return out;
}

/**
 * All six metrics for pooled predictions. `gene_ids` labels columns and `patch_ids` labels rows.
 */
inline MetricsReport evaluate(const Matrix& pred, const Matrix& truth, const BoolMatrix& mask,
                              std::vector<std::string> gene_ids, std::vector<std::string> patch_ids) {
    if (gene_ids.size() != truth.cols() || patch_ids.size() != truth.rows()) {
        throw Error(ErrorKind::ShapeMismatch, "id lists do not match the matrices");
    }
    MetricsReport r;
    std::tie(r.mse, r.mae) = masked_mse_mae(pred, truth, mask);
    auto genes = gene_metrics(pred, truth, mask);
    auto patches = patch_metrics(pred, truth, mask);
    r.pcc_gene = genes.pcc;
    r.r2_gene = genes.r2;
    r.pcc_patch = patches.pcc;
    r.r2_patch = patches.r2;
    r.gene_pcc = std::move(genes.per_item_pcc);
    r.gene_r2 = std::move(genes.per_item_r2);
    r.patch_pcc = std::move(patches.per_item_pcc);
    r.patch_r2 = std::move(patches.per_item_r2);
    r.excluded_genes = genes.excluded;
    r.excluded_patches = patches.excluded;
    r.gene_ids = std::move(gene_ids);
    r.patch_ids = std::move(patch_ids);
    r.n_values = truth.size();
    for (auto m : mask.data()) {
        r.n_masked += (m != 0);
    }
    return r;
}

/**
 * @brief The aggregate lines of `metrics.tsv`.
 */
struct MetricsSummary {
    double mse = 0, mae = 0, pcc_gene = 0, pcc_patch = 0, r2_gene = 0, r2_patch = 0;
    std::size_t excluded_genes = 0, excluded_patches = 0, n_masked = 0, n_values = 0;

    friend bool operator==(const MetricsSummary&, const MetricsSummary&) = default;
};

inline MetricsSummary summarize(const MetricsReport& r) {
    return {r.mse, r.mae, r.pcc_gene, r.pcc_patch, r.r2_gene, r.r2_patch, r.excluded_genes, r.excluded_patches, r.n_masked, r.n_values};
}

namespace detail {

inline std::string fmt_metric(double v) {
    return std::isnan(v) ? std::string("NA") : format_real(v);
}

inline std::string fmt_optional(const std::optional<double>& v) {
    return v ? format_real(*v) : std::string("NA");
}

}

inline void write_report(const std::string& path, const MetricsReport& r) {
    Table t{"metrics", {"metric", "value"}, {}};
    t.rows = {
        {"MSE", detail::fmt_metric(r.mse)},
        {"MAE", detail::fmt_metric(r.mae)},
        {"PCC-Gene", detail::fmt_metric(r.pcc_gene)},
        {"PCC-Patch", detail::fmt_metric(r.pcc_patch)},
        {"R2-Gene", detail::fmt_metric(r.r2_gene)},
        {"R2-Patch", detail::fmt_metric(r.r2_patch)},
        {"excluded_genes", std::to_string(r.excluded_genes)},
        {"excluded_patches", std::to_string(r.excluded_patches)},
        {"n_masked", std::to_string(r.n_masked)},
        {"n_values", std::to_string(r.n_values)},
    };
    write_table(path, t);
}

inline MetricsSummary read_report(const std::string& path) {
    auto t = read_table(path);
    if (t.columns != std::vector<std::string>{"metric", "value"}) {
        throw Error(ErrorKind::MalformedRow, "'" + path + "' is not a metrics table");
    }
    MetricsSummary s;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& key = t.rows[i][0];
        const auto& val = t.rows[i][1];
        auto real = [&]() { return val == "NA" ? std::numeric_limits<double>::quiet_NaN() : detail::parse_real(val, path, i + 1); };
        auto count = [&]() { return static_cast<std::size_t>(detail::parse_integer(val, path, i + 1)); };
        if (key == "MSE") s.mse = real();
        else if (key == "MAE") s.mae = real();
        else if (key == "PCC-Gene") s.pcc_gene = real();
        else if (key == "PCC-Patch") s.pcc_patch = real();
        else if (key == "R2-Gene") s.r2_gene = real();
        else if (key == "R2-Patch") s.r2_patch = real();
        else if (key == "excluded_genes") s.excluded_genes = count();
        else if (key == "excluded_patches") s.excluded_patches = count();
        else if (key == "n_masked") s.n_masked = count();
        else if (key == "n_values") s.n_values = count();
        else throw Error(ErrorKind::MalformedRow, "'" + path + "' has unknown metric '" + key + "'");
    }
    return s;
}

inline void write_per_gene(const std::string& path, const MetricsReport& r) {
    Table t{"per_gene", {"gene_id", "pcc", "r2"}, {}};
    for (std::size_t j = 0; j < r.gene_ids.size(); ++j) {
        t.rows.push_back({r.gene_ids[j], detail::fmt_optional(r.gene_pcc[j]), detail::fmt_optional(r.gene_r2[j])});
    }
    write_table(path, t);
}

inline void write_per_patch(const std::string& path, const MetricsReport& r) {
    Table t{"per_patch", {"patch_id", "pcc", "r2"}, {}};
    for (std::size_t i = 0; i < r.patch_ids.size(); ++i) {
        t.rows.push_back({r.patch_ids[i], detail::fmt_optional(r.patch_pcc[i]), detail::fmt_optional(r.patch_r2[i])});
    }
    write_table(path, t);
}

/**
 * @brief Counts of per-gene PCC values in 40 bins of width 0.05 over [-1, 1]; the last bin is closed.
 */
struct PccHistogram {
    static constexpr std::size_t n_bins = 40;
    std::array<std::size_t, n_bins> counts{};

    static double lower_edge(std::size_t bin) { return static_cast<double>(static_cast<long>(bin) * 5 - 100) / 100.0; }
    static double upper_edge(std::size_t bin) { return lower_edge(bin + 1); }

    std::size_t total() const {
        std::size_t n = 0;
        for (auto c : counts) {
            n += c;
        }
        return n;
    }
};

inline PccHistogram pcc_histogram(const std::vector<std::optional<double>>& pcc) {
    PccHistogram h;
    for (const auto& v : pcc) {
        if (!v) {
            continue;
        }
        const long bin = static_cast<long>(std::floor((*v + 1.0) / 0.05));
        h.counts[static_cast<std::size_t>(std::clamp(bin, 0L, static_cast<long>(PccHistogram::n_bins) - 1))] += 1;
    }
    return h;
}

inline void write_pcc_histogram(const std::string& path, const PccHistogram& h) {
    std::string body = std::string("#sepal_format=") + format_version + "\n#kind=pcc_histogram\nbin_lo,bin_hi,count\n";
    for (std::size_t b = 0; b < PccHistogram::n_bins; ++b) {
        body += format_real(PccHistogram::lower_edge(b)) + "," + format_real(PccHistogram::upper_edge(b)) + "," + std::to_string(h.counts[b]) + "\n";
    }
    detail::write_file(path, body);
}

/**
 * Genes with the highest and lowest defined PCC, `count` of each. Ties go to the lexicographically smaller gene ID.
 */
inline std::pair<std::vector<std::string>, std::vector<std::string>> extreme_genes(const MetricsReport& r, std::size_t count) {
    std::vector<std::pair<double, std::string>> defined;
    for (std::size_t j = 0; j < r.gene_ids.size(); ++j) {
        if (r.gene_pcc[j]) {
            defined.emplace_back(*r.gene_pcc[j], r.gene_ids[j]);
        }
    }
    auto top = defined, bottom = defined;
    std::sort(top.begin(), top.end(), [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    std::sort(bottom.begin(), bottom.end(), [](const auto& a, const auto& b) { return a.first != b.first ? a.first < b.first : a.second < b.second; });
    std::pair<std::vector<std::string>, std::vector<std::string>> out;
    for (std::size_t i = 0; i < std::min(count, top.size()); ++i) {
        out.first.push_back(top[i].second);
        out.second.push_back(bottom[i].second);
    }
    return out;
}

/**
 * @brief Predictions and ground truth of one evaluated slide.
 */
struct SlideOutcome {
    std::vector<SpotRecord> spots;
    ExpressionMatrix prediction;
    ExpressionMatrix truth;
    ImputationMask mask;
};

/**
 * Write the PCC histogram and paired truth/prediction heatmaps for the two best and two worst genes.
 * Imputed truth cells are drawn as missing.
 *
 * @return Paths of the files written.
 */
inline std::vector<std::string> emit_figures(const MetricsReport& report, const std::vector<SlideOutcome>& slides, const std::string& outdir) {
    std::vector<std::string> written;
    std::error_code ec;
    std::filesystem::create_directories(outdir, ec);
    if (ec) {
        throw Error(ErrorKind::IoFailure, "cannot create '" + outdir + "'");
    }
    const auto hist_path = (std::filesystem::path(outdir) / "pcc_hist.csv").string();
    write_pcc_histogram(hist_path, pcc_histogram(report.gene_pcc));
    written.push_back(hist_path);

    auto [top, bottom] = extreme_genes(report, 2);
    std::vector<std::string> genes = top;
    for (const auto& g : bottom) {
        if (std::find(genes.begin(), genes.end(), g) == genes.end()) {
            genes.push_back(g);
        }
    }
    for (const auto& slide : slides) {
        for (const auto& gene : genes) {
            auto it = std::find(slide.truth.gene_ids.begin(), slide.truth.gene_ids.end(), gene);
            if (it == slide.truth.gene_ids.end()) {
                continue;
            }
            const std::size_t j = static_cast<std::size_t>(it - slide.truth.gene_ids.begin());
            std::vector<std::optional<double>> truth_vals, pred_vals;
            for (std::size_t i = 0; i < slide.spots.size(); ++i) {
                if (slide.mask.values(i, j)) {
                    truth_vals.emplace_back(std::nullopt);
                } else {
                    truth_vals.emplace_back(slide.truth.values(i, j));
                }
                pred_vals.emplace_back(slide.prediction.values(i, j));
            }
            const auto base = (std::filesystem::path(outdir) / ("heatmap_" + slide.truth.slide_id + "_" + gene)).string();
            try {
                write_heatmap(slide.spots, truth_vals, base + "_truth.ppm");
                written.push_back(base + "_truth.ppm");
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::EmptySlide) {
                    throw;
                }
            }
            write_heatmap(slide.spots, pred_vals, base + "_pred.ppm");
            written.push_back(base + "_pred.ppm");
        }
    }
    return written;
}

}

#endif
