#ifndef SEPAL_PREPROCESS_HPP
#define SEPAL_PREPROCESS_HPP

#include "core.hpp"
#include "ingest.hpp"

#include <cmath>
#include <optional>
#include <unordered_map>
#include <vector>

/**
 * @file preprocess.hpp
 *
 * @brief Count filtering, sparsity filtering, TPM normalization, log transform, slide centering and delta targets.
 *
 * The fixed order is: count filter, sparsity filter, TPM, log2(x+1), denoise, optional centering, gene selection.
 */

namespace sepal {

/**
 * @brief One removed spot or gene, with the reason it was dropped.
 */
struct Removal {
    std::string slide_id;   // empty for genes, which are removed dataset-wide
    std::string id;
    std::string reason;

    friend bool operator==(const Removal&, const Removal&) = default;
};

struct FilterResult {
    std::vector<ExpressionMatrix> matrices;
    std::vector<Removal> removed;
};

/**
 * Copy of `matrix` restricted to the listed genes, in the listed order.
 */
inline ExpressionMatrix subset_genes(const ExpressionMatrix& matrix, const std::vector<std::string>& genes) {
    std::unordered_map<std::string, std::size_t> col;
    for (std::size_t j = 0; j < matrix.gene_ids.size(); ++j) {
        col[matrix.gene_ids[j]] = j;
    }
    std::vector<std::size_t> idx;
    idx.reserve(genes.size());
    for (const auto& g : genes) {
        auto it = col.find(g);
        if (it == col.end()) {
            throw Error(ErrorKind::GeneAlignmentMismatch, "gene '" + g + "' not present in slide '" + matrix.slide_id + "'");
        }
        idx.push_back(it->second);
    }
    ExpressionMatrix out;
    out.slide_id = matrix.slide_id;
    out.spot_ids = matrix.spot_ids;
    out.gene_ids = genes;
    out.stage = matrix.stage;
    out.values = Matrix(matrix.n_spots(), genes.size());
    for (std::size_t i = 0; i < matrix.n_spots(); ++i) {
        for (std::size_t j = 0; j < idx.size(); ++j) {
            out.values(i, j) = matrix.values(i, idx[j]);
        }
    }
    return out;
}

inline ImputationMask subset_genes(const ImputationMask& mask, const std::vector<std::string>& genes) {
    std::unordered_map<std::string, std::size_t> col;
    for (std::size_t j = 0; j < mask.gene_ids.size(); ++j) {
        col[mask.gene_ids[j]] = j;
    }
    ImputationMask out{mask.slide_id, genes, mask.spot_ids, BoolMatrix(mask.spot_ids.size(), genes.size(), 0)};
    for (std::size_t j = 0; j < genes.size(); ++j) {
        auto it = col.find(genes[j]);
        if (it == col.end()) {
            throw Error(ErrorKind::GeneAlignmentMismatch, "gene '" + genes[j] + "' not present in mask of slide '" + mask.slide_id + "'");
        }
        for (std::size_t i = 0; i < mask.spot_ids.size(); ++i) {
            out.values(i, j) = mask.values(i, it->second);
        }
    }
    return out;
}

/**
 * Reorder the gene columns of every slide to match the first slide.
 * @throws Error with `GeneSetMismatch` if the gene sets differ.
 */
inline void align_genes(std::vector<ExpressionMatrix>& matrices) {
    if (matrices.empty()) {
        return;
    }
    const auto& reference = matrices.front().gene_ids;
    for (auto& m : matrices) {
        if (m.gene_ids == reference) {
            continue;
        }
        if (m.gene_ids.size() != reference.size()) {
            throw Error(ErrorKind::GeneSetMismatch, "slide '" + m.slide_id + "' has a different gene set");
        }
        try {
            m = subset_genes(m, reference);
        } catch (const Error&) {
            throw Error(ErrorKind::GeneSetMismatch, "slide '" + m.slide_id + "' has a different gene set");
        }
    }
}

namespace detail {

inline ExpressionMatrix keep_rows(const ExpressionMatrix& m, const std::vector<std::size_t>& rows) {
    ExpressionMatrix out;
    out.slide_id = m.slide_id;
    out.gene_ids = m.gene_ids;
    out.stage = m.stage;
    out.values = Matrix(rows.size(), m.n_genes());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.spot_ids.push_back(m.spot_ids[rows[i]]);
        auto src = m.values.row(rows[i]);
        std::copy(src.begin(), src.end(), out.values.row(i).begin());
    }
    return out;
}

}

/**
 * Remove spots whose total counts fall outside `[min_spot_counts, max_spot_counts]` (per slide),
 * then genes whose total counts pooled over all slides fall outside `[min_gene_counts, max_gene_counts]`.
 */
inline FilterResult filter_by_counts(std::vector<ExpressionMatrix> matrices, const FilterThresholds& thr) {
    thr.validate();
    align_genes(matrices);
    FilterResult result;

    for (auto& m : matrices) {
        require_stage(m.stage, {Stage::raw_counts}, "count filtering");
        std::vector<std::size_t> keep;
        for (std::size_t i = 0; i < m.n_spots(); ++i) {
            double total = 0;
            for (double v : m.values.row(i)) {
                total += v;
            }
            if (total < thr.min_spot_counts || total > thr.max_spot_counts) {
                result.removed.push_back({m.slide_id, m.spot_ids[i], "spot_total_counts=" + format_real(total)});
            } else {
                keep.push_back(i);
            }
        }
        if (keep.empty()) {
            throw Error(ErrorKind::AllSpotsRemoved, "count filter removed every spot of slide '" + m.slide_id + "'");
        }
        m = detail::keep_rows(m, keep);
    }

    const std::size_t n_genes = matrices.empty() ? 0 : matrices.front().n_genes();
    std::vector<double> gene_totals(n_genes, 0);
    for (const auto& m : matrices) {
        for (std::size_t i = 0; i < m.n_spots(); ++i) {
            for (std::size_t j = 0; j < n_genes; ++j) {
                gene_totals[j] += m.values(i, j);
            }
        }
    }
    std::vector<std::string> kept;
    for (std::size_t j = 0; j < n_genes; ++j) {
        const auto& gene = matrices.front().gene_ids[j];
        if (gene_totals[j] < thr.min_gene_counts || gene_totals[j] > thr.max_gene_counts) {
            result.removed.push_back({"", gene, "gene_total_counts=" + format_real(gene_totals[j])});
        } else {
            kept.push_back(gene);
        }
    }
    if (kept.empty()) {
        throw Error(ErrorKind::AllGenesRemoved, "count filter removed every gene");
    }
    for (auto& m : matrices) {
        m = subset_genes(m, kept);
        m.stage = Stage::filtered;
    }
    result.matrices = std::move(matrices);
    return result;
}

inline FilterResult filter_by_counts(const ExpressionMatrix& matrix, const FilterThresholds& thr) {
    return filter_by_counts(std::vector<ExpressionMatrix>{matrix}, thr);
}

/**
 * Genes that are nonzero in at least `eps_total` percent of all pooled spots and at least `eps_wsi` percent of the spots of every slide.
 * Genes keep the column order of the first slide.
 */
inline std::vector<std::string> filter_by_sparsity(const std::vector<ExpressionMatrix>& matrices, double eps_total, double eps_wsi) {
    if (matrices.empty()) {
        throw Error(ErrorKind::AllGenesRemoved, "no slides to filter");
    }
    if (eps_total < 0 || eps_total > 100 || eps_wsi < 0 || eps_wsi > 100) {
        throw Error(ErrorKind::InvalidConfig, "sparsity thresholds must lie in [0, 100]");
    }
    const auto& genes = matrices.front().gene_ids;
    for (const auto& m : matrices) {
        if (m.gene_ids != genes) {
            throw Error(ErrorKind::GeneSetMismatch, "slide '" + m.slide_id + "' gene columns differ from slide '" + matrices.front().slide_id + "'");
        }
    }

    std::vector<std::size_t> pooled_nonzero(genes.size(), 0);
    std::vector<bool> per_slide_ok(genes.size(), true);
    std::size_t pooled_spots = 0;
    for (const auto& m : matrices) {
        std::vector<std::size_t> nonzero(genes.size(), 0);
        for (std::size_t i = 0; i < m.n_spots(); ++i) {
            for (std::size_t j = 0; j < genes.size(); ++j) {
                nonzero[j] += (m.values(i, j) != 0);
            }
        }
        for (std::size_t j = 0; j < genes.size(); ++j) {
            pooled_nonzero[j] += nonzero[j];
            // Compare counts rather than fractions: nonzero/n >= eps/100  <=>  100*nonzero >= eps*n.
            if (100.0 * static_cast<double>(nonzero[j]) < eps_wsi * static_cast<double>(m.n_spots())) {
                per_slide_ok[j] = false;
            }
        }
        pooled_spots += m.n_spots();
    }

    std::vector<std::string> keep;
    for (std::size_t j = 0; j < genes.size(); ++j) {
        if (per_slide_ok[j] && 100.0 * static_cast<double>(pooled_nonzero[j]) >= eps_total * static_cast<double>(pooled_spots)) {
            keep.push_back(genes[j]);
        }
    }
    if (keep.empty()) {
        throw Error(ErrorKind::AllGenesRemoved, "sparsity filter removed every gene");
    }
    return keep;
}

/**
 * Read a gene length table with columns `gene_id` and `length_kb`.
 */
inline std::unordered_map<std::string, double> read_gene_lengths(const std::string& path) {
    auto table = read_table(path);
    if (table.columns != std::vector<std::string>{"gene_id", "length_kb"}) {
        throw Error(ErrorKind::MalformedRow, "'" + path + "' must have columns gene_id, length_kb");
    }
    std::unordered_map<std::string, double> out;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        double len = detail::parse_real(table.rows[r][1], path, r + 1);
        if (len <= 0) {
            throw Error(ErrorKind::InvalidConfig, "gene length for '" + table.rows[r][0] + "' must be positive");
        }
        out[table.rows[r][0]] = len;
    }
    return out;
}

/**
 * Transcripts-per-million normalization of filtered counts.
 *
 * Each count is divided by its gene length in kilobases (1 when no map is given, which gives counts per million),
 * and each spot's rates are then rescaled to sum to 10^6.
 */
inline ExpressionMatrix tpm_normalize(const ExpressionMatrix& matrix, const std::unordered_map<std::string, double>* gene_lengths = nullptr) {
    require_stage(matrix.stage, {Stage::filtered}, "TPM normalization");
    std::vector<double> lengths(matrix.n_genes(), 1.0);
    if (gene_lengths) {
        for (std::size_t j = 0; j < matrix.n_genes(); ++j) {
            auto it = gene_lengths->find(matrix.gene_ids[j]);
            if (it == gene_lengths->end()) {
                throw Error(ErrorKind::GeneAlignmentMismatch, "no length for gene '" + matrix.gene_ids[j] + "'");
            }
            lengths[j] = it->second;
        }
    }

    ExpressionMatrix out = matrix;
    out.stage = Stage::tpm;
    for (std::size_t i = 0; i < out.n_spots(); ++i) {
        auto row = out.values.row(i);
        double total = 0;
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] /= lengths[j];
            total += row[j];
        }
        if (total <= 0) {
            throw Error(ErrorKind::ZeroRowSum, "spot '" + out.spot_ids[i] + "' of slide '" + out.slide_id + "' has no counts");
        }
        for (auto& v : row) {
            v = v / total * 1e6;
        }
    }
    return out;
}

/**
 * Elementwise `log2(x + 1)`.
 */
inline ExpressionMatrix log1p_transform(const ExpressionMatrix& matrix) {
    require_stage(matrix.stage, {Stage::tpm}, "log transform");
    ExpressionMatrix out = matrix;
    out.stage = Stage::log1p;
    for (auto& v : out.values.data()) {
        if (v < 0) {
            throw Error(ErrorKind::NegativeValue, "negative value in slide '" + out.slide_id + "' before log transform");
        }
        v = std::log2(v + 1.0);
    }
    return out;
}

/**
 * Shift every gene in every slide so that its slide mean equals its mean over all pooled spots.
 * When `enabled` is false the input is returned unchanged.
 */
inline std::vector<ExpressionMatrix> center_per_slide(std::vector<ExpressionMatrix> matrices, bool enabled) {
    if (!enabled || matrices.empty()) {
        return matrices;
    }
    align_genes(matrices);
    const std::size_t n_genes = matrices.front().n_genes();
    std::vector<std::vector<double>> slide_sums(matrices.size(), std::vector<double>(n_genes, 0));
    std::vector<double> total(n_genes, 0);
    std::size_t total_spots = 0;
    for (std::size_t s = 0; s < matrices.size(); ++s) {
        const auto& m = matrices[s];
        require_stage(m.stage, {Stage::log1p, Stage::denoised}, "slide centering");
        for (std::size_t i = 0; i < m.n_spots(); ++i) {
            for (std::size_t j = 0; j < n_genes; ++j) {
                slide_sums[s][j] += m.values(i, j);
            }
        }
        for (std::size_t j = 0; j < n_genes; ++j) {
            total[j] += slide_sums[s][j];
        }
        total_spots += m.n_spots();
    }
    if (matrices.size() == 1) {
        return matrices;
    }
    for (std::size_t s = 0; s < matrices.size(); ++s) {
        auto& m = matrices[s];
        for (std::size_t j = 0; j < n_genes; ++j) {
            const double shift = total[j] / static_cast<double>(total_spots) - slide_sums[s][j] / static_cast<double>(m.n_spots());
            for (std::size_t i = 0; i < m.n_spots(); ++i) {
                m.values(i, j) += shift;
            }
        }
    }
    return matrices;
}

/**
 * Per-gene arithmetic mean over every spot of the training slides.
 *
 * @param matrices Expression for each slide, all with the same gene order.
 * @param splits Split of each slide, parallel to `matrices`.
 */
inline TrainMeanVector compute_train_mean(const std::vector<ExpressionMatrix>& matrices, const std::vector<Split>& splits) {
    if (matrices.size() != splits.size()) {
        throw Error(ErrorKind::ShapeMismatch, "one split per slide is required");
    }
    TrainMeanVector out;
    std::size_t n = 0;
    for (std::size_t s = 0; s < matrices.size(); ++s) {
        if (splits[s] != Split::train) {
            continue;
        }
        const auto& m = matrices[s];
        require_stage(m.stage, {Stage::denoised}, "train mean");
        if (out.gene_ids.empty()) {
            out.gene_ids = m.gene_ids;
            out.means.assign(m.n_genes(), 0);
        } else if (m.gene_ids != out.gene_ids) {
            throw Error(ErrorKind::GeneAlignmentMismatch, "training slides disagree on gene order");
        }
        for (std::size_t i = 0; i < m.n_spots(); ++i) {
            for (std::size_t j = 0; j < m.n_genes(); ++j) {
                out.means[j] += m.values(i, j);
            }
        }
        n += m.n_spots();
    }
    if (n == 0) {
        throw Error(ErrorKind::EmptyTrainSplit, "no training spots to average");
    }
    for (auto& v : out.means) {
        v /= static_cast<double>(n);
    }
    return out;
}

namespace detail {

inline void check_alignment(const ExpressionMatrix& matrix, const TrainMeanVector& mean) {
    if (matrix.gene_ids != mean.gene_ids || mean.means.size() != mean.gene_ids.size()) {
        throw Error(ErrorKind::GeneAlignmentMismatch, "mean vector genes do not match slide '" + matrix.slide_id + "'");
    }
}

}

/**
 * Subtract the training mean from every spot: the delta targets.
 */
inline Matrix to_delta(const ExpressionMatrix& matrix, const TrainMeanVector& mean) {
    detail::check_alignment(matrix, mean);
    Matrix out = matrix.values;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto row = out.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] -= mean.means[j];
        }
    }
    return out;
}

/**
 * Add the training mean back onto delta values.
 */
inline Matrix from_delta(const Matrix& delta, const TrainMeanVector& mean) {
    if (delta.cols() != mean.means.size()) {
        throw Error(ErrorKind::GeneAlignmentMismatch, "delta width does not match the mean vector");
    }
    Matrix out = delta;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto row = out.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] += mean.means[j];
        }
    }
    return out;
}

inline void write_train_mean(const std::string& path, const TrainMeanVector& mean) {
    Table t{"train_mean", {"gene_id", "mean"}, {}};
    for (std::size_t j = 0; j < mean.gene_ids.size(); ++j) {
        t.rows.push_back({mean.gene_ids[j], format_real(mean.means[j])});
    }
    write_table(path, t);
}

inline TrainMeanVector read_train_mean(const std::string& path) {
    auto t = read_table(path);
    if (t.columns != std::vector<std::string>{"gene_id", "mean"}) {
        throw Error(ErrorKind::MalformedRow, "'" + path + "' is not a train-mean table");
    }
    TrainMeanVector out;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        out.gene_ids.push_back(t.rows[r][0]);
        out.means.push_back(detail::parse_real(t.rows[r][1], path, r + 1));
    }
    return out;
}

inline void write_removals(const std::string& path, const std::vector<Removal>& removed) {
    Table t{"removals", {"slide_id", "id", "reason"}, {}};
    for (const auto& r : removed) {
        t.rows.push_back({r.slide_id.empty() ? "*" : r.slide_id, r.id, r.reason});
    }
    write_table(path, t);
}

}

#endif
