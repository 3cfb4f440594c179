#ifndef SEPAL_CORE_HPP
#define SEPAL_CORE_HPP

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <initializer_list>
#include <iterator>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

/**
 * @file core.hpp
 *
 * @brief Domain types shared by every stage of the pipeline.
 */

namespace sepal {

/**
 * @brief Categories of failure raised by the library.
 *
 * Every thrown `Error` carries one of these so that callers (notably the CLI)
 * can map failures onto exit codes without parsing messages.
 */
enum class ErrorKind {
    MalformedRow,
    DuplicateSpot,
    NonFiniteValue,
    WidthMismatch,
    IoFailure,
    EmptySlide,
    MissingEmbedding,
    GeneSetMismatch,
    AllSpotsRemoved,
    AllGenesRemoved,
    ZeroRowSum,
    NegativeValue,
    EmptyTrainSplit,
    GeneAlignmentMismatch,
    DegenerateCoordinates,
    EmptyAdjacency,
    TooFewGenes,
    WidthNotDivisible,
    ShapeMismatch,
    NoRecordedForward,
    EmptySplit,
    DivergedLoss,
    AllMasked,
    AllGenesExcluded,
    AllPatchesExcluded,
    StageOrderViolation,
    InvalidConfig
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::MalformedRow: return "MalformedRow";
        case ErrorKind::DuplicateSpot: return "DuplicateSpot";
        case ErrorKind::NonFiniteValue: return "NonFiniteValue";
        case ErrorKind::WidthMismatch: return "WidthMismatch";
        case ErrorKind::IoFailure: return "IoFailure";
        case ErrorKind::EmptySlide: return "EmptySlide";
        case ErrorKind::MissingEmbedding: return "MissingEmbedding";
        case ErrorKind::GeneSetMismatch: return "GeneSetMismatch";
        case ErrorKind::AllSpotsRemoved: return "AllSpotsRemoved";
        case ErrorKind::AllGenesRemoved: return "AllGenesRemoved";
        case ErrorKind::ZeroRowSum: return "ZeroRowSum";
        case ErrorKind::NegativeValue: return "NegativeValue";
        case ErrorKind::EmptyTrainSplit: return "EmptyTrainSplit";
        case ErrorKind::GeneAlignmentMismatch: return "GeneAlignmentMismatch";
        case ErrorKind::DegenerateCoordinates: return "DegenerateCoordinates";
        case ErrorKind::EmptyAdjacency: return "EmptyAdjacency";
        case ErrorKind::TooFewGenes: return "TooFewGenes";
        case ErrorKind::WidthNotDivisible: return "WidthNotDivisible";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::NoRecordedForward: return "NoRecordedForward";
        case ErrorKind::EmptySplit: return "EmptySplit";
        case ErrorKind::DivergedLoss: return "DivergedLoss";
        case ErrorKind::AllMasked: return "AllMasked";
        case ErrorKind::AllGenesExcluded: return "AllGenesExcluded";
        case ErrorKind::AllPatchesExcluded: return "AllPatchesExcluded";
        case ErrorKind::StageOrderViolation: return "StageOrderViolation";
        case ErrorKind::InvalidConfig: return "InvalidConfig";
    }
    return "Unknown";
}

/**
 * @brief Exception type for all library failures.
 */
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message) :
        std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

/**
 * @brief Row-major dense matrix.
 *
 * @tparam T Element type; `double` for values and `std::uint8_t` for boolean masks.
 */
template<typename T>
class DenseMatrix {
public:
    DenseMatrix() = default;

    DenseMatrix(std::size_t rows, std::size_t cols, T fill = T{}) :
        rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<T> data) :
        rows_(rows), cols_(cols), data_(std::move(data))
    {
        if (data_.size() != rows_ * cols_) {
            throw Error(ErrorKind::ShapeMismatch, "data length does not match " + std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    bool same_shape(const DenseMatrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }

    template<typename U>
    bool same_shape(const DenseMatrix<U>& other) const { return rows_ == other.rows() && cols_ == other.cols(); }

    friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Matrix = DenseMatrix<double>;
using BoolMatrix = DenseMatrix<std::uint8_t>;

/**
 * @brief Processing stage of an expression matrix.
 *
 * Stages advance in the fixed pipeline order; tools check the tag before operating.
 */
enum class Stage { raw_counts, filtered, tpm, log1p, denoised, predicted };

inline const char* to_string(Stage stage) {
    switch (stage) {
        case Stage::raw_counts: return "raw_counts";
        case Stage::filtered: return "filtered";
        case Stage::tpm: return "tpm";
        case Stage::log1p: return "log1p";
        case Stage::denoised: return "denoised";
        case Stage::predicted: return "predicted";
    }
    return "unknown";
}

inline std::optional<Stage> parse_stage(const std::string& text) {
    for (auto s : {Stage::raw_counts, Stage::filtered, Stage::tpm, Stage::log1p, Stage::denoised, Stage::predicted}) {
        if (text == to_string(s)) {
            return s;
        }
    }
    return std::nullopt;
}

inline void require_stage(Stage actual, std::initializer_list<Stage> allowed, const std::string& what) {
    for (auto s : allowed) {
        if (s == actual) {
            return;
        }
    }
    std::string names;
    for (auto s : allowed) {
        if (!names.empty()) {
            names += " or ";
        }
        names += to_string(s);
    }
    throw Error(ErrorKind::StageOrderViolation, what + " requires stage " + names + ", got " + to_string(actual));
}

/**
 * @brief Location of one spot on a slide.
 */
struct SpotRecord {
    std::string spot_id;
    std::string slide_id;
    double pixel_x = 0;
    double pixel_y = 0;
    long array_row = 0;
    long array_col = 0;

    friend bool operator==(const SpotRecord&, const SpotRecord&) = default;
};

/**
 * Sort spots by (array_row, array_col), breaking ties by `spot_id`.
 * @throws Error with `DuplicateSpot` if a spot ID or grid position is repeated.
 */
inline void canonicalize_spots(std::vector<SpotRecord>& spots) {
    std::sort(spots.begin(), spots.end(), [](const SpotRecord& a, const SpotRecord& b) {
        if (a.array_row != b.array_row) {
            return a.array_row < b.array_row;
        }
        if (a.array_col != b.array_col) {
            return a.array_col < b.array_col;
        }
        return a.spot_id < b.spot_id;
    });

    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < spots.size(); ++i) {
        if (!seen.insert(spots[i].spot_id).second) {
            throw Error(ErrorKind::DuplicateSpot, "spot '" + spots[i].spot_id + "' appears more than once");
        }
        if (i > 0 && spots[i].array_row == spots[i - 1].array_row && spots[i].array_col == spots[i - 1].array_col) {
            throw Error(ErrorKind::DuplicateSpot, "spots '" + spots[i - 1].spot_id + "' and '" + spots[i].spot_id + "' share grid position");
        }
    }
}

/**
 * @brief Spots-by-genes expression table for one slide.
 */
struct ExpressionMatrix {
    std::string slide_id;
    std::vector<std::string> gene_ids;
    std::vector<std::string> spot_ids;
    Matrix values;
    Stage stage = Stage::raw_counts;

    std::size_t n_spots() const { return spot_ids.size(); }
    std::size_t n_genes() const { return gene_ids.size(); }

    /**
     * @throws Error if ids and values disagree in shape, gene ids repeat, or stage-specific value constraints fail.
     */
    void validate() const {
        if (values.rows() != spot_ids.size() || values.cols() != gene_ids.size()) {
            throw Error(ErrorKind::ShapeMismatch, "expression values do not match id lists for slide '" + slide_id + "'");
        }
        std::unordered_set<std::string> genes(gene_ids.begin(), gene_ids.end());
        if (genes.size() != gene_ids.size()) {
            throw Error(ErrorKind::GeneSetMismatch, "duplicate gene ids in slide '" + slide_id + "'");
        }
        std::unordered_set<std::string> spots(spot_ids.begin(), spot_ids.end());
        if (spots.size() != spot_ids.size()) {
            throw Error(ErrorKind::DuplicateSpot, "duplicate spot ids in slide '" + slide_id + "'");
        }
        if (stage == Stage::raw_counts) {
            for (double v : values.data()) {
                if (v < 0 || v != static_cast<double>(static_cast<long long>(v))) {
                    throw Error(ErrorKind::NegativeValue, "raw counts must be nonnegative integers in slide '" + slide_id + "'");
                }
            }
        } else if (stage == Stage::log1p) {
            for (double v : values.data()) {
                if (v < 0) {
                    throw Error(ErrorKind::NegativeValue, "log1p values must be nonnegative in slide '" + slide_id + "'");
                }
            }
        }
    }

    friend bool operator==(const ExpressionMatrix&, const ExpressionMatrix&) = default;
};

/**
 * @brief Per-cell record of which expression values were imputed.
 */
struct ImputationMask {
    std::string slide_id;
    std::vector<std::string> gene_ids;
    std::vector<std::string> spot_ids;
    BoolMatrix values;

    /** All-false mask shaped like `matrix`. */
    static ImputationMask empty_like(const ExpressionMatrix& matrix) {
        return ImputationMask{matrix.slide_id, matrix.gene_ids, matrix.spot_ids, BoolMatrix(matrix.n_spots(), matrix.n_genes(), 0)};
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (auto v : values.data()) {
            n += (v != 0);
        }
        return n;
    }

    friend bool operator==(const ImputationMask&, const ImputationMask&) = default;
};

inline void check_mask_shape(const ImputationMask& mask, const ExpressionMatrix& matrix) {
    if (!mask.values.same_shape(matrix.values) || mask.gene_ids != matrix.gene_ids || mask.spot_ids != matrix.spot_ids) {
        throw Error(ErrorKind::ShapeMismatch, "mask does not match expression matrix of slide '" + matrix.slide_id + "'");
    }
}

/**
 * @brief Per-spot visual embedding vectors from an external image encoder.
 */
struct EmbeddingTable {
    std::string slide_id;
    std::vector<std::string> spot_ids;
    Matrix vectors;

    std::size_t d_emb() const { return vectors.cols(); }

    friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;
};

enum class Geometry { hex_array, square_grid, auto_radius };

inline const char* to_string(Geometry g) {
    switch (g) {
        case Geometry::hex_array: return "hex_array";
        case Geometry::square_grid: return "square_grid";
        case Geometry::auto_radius: return "auto_radius";
    }
    return "unknown";
}

inline std::optional<Geometry> parse_geometry(const std::string& text) {
    for (auto g : {Geometry::hex_array, Geometry::square_grid, Geometry::auto_radius}) {
        if (text == to_string(g)) {
            return g;
        }
    }
    return std::nullopt;
}

enum class Split { train, val, test };

inline const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "unknown";
}

inline std::optional<Split> parse_split(const std::string& text) {
    for (auto s : {Split::train, Split::val, Split::test}) {
        if (text == to_string(s)) {
            return s;
        }
    }
    return std::nullopt;
}

/**
 * @brief Count-range and sparsity thresholds for gene and spot filtering.
 *
 * Percentages are on the [0, 100] scale.
 */
struct FilterThresholds {
    double min_spot_counts = 0;
    double max_spot_counts = 0;
    double min_gene_counts = 0;
    double max_gene_counts = 0;
    double eps_total = 0;
    double eps_wsi = 0;

    void validate() const {
        if (min_spot_counts < 0 || min_gene_counts < 0 || min_spot_counts > max_spot_counts || min_gene_counts > max_gene_counts) {
            throw Error(ErrorKind::InvalidConfig, "count thresholds must satisfy 0 <= min <= max");
        }
        if (eps_total < 0 || eps_total > 100 || eps_wsi < 0 || eps_wsi > 100) {
            throw Error(ErrorKind::InvalidConfig, "sparsity thresholds must lie in [0, 100]");
        }
    }
};

struct SlideEntry {
    std::string slide_id;
    std::string coords_path;
    std::string expr_path;
    std::string emb_path;
    Split split = Split::train;
};

/**
 * @brief Description of a dataset: where its slides live, how they are split, and the filtering constants.
 */
struct DatasetManifest {
    std::string name;
    Geometry geometry = Geometry::hex_array;
    std::vector<SlideEntry> slides;
    FilterThresholds thresholds;
    std::size_t n_genes_select = 256;
    bool center_slides = false;
    std::string gene_lengths_path;

    std::vector<std::string> slides_in(Split s) const {
        std::vector<std::string> out;
        for (const auto& e : slides) {
            if (e.split == s) {
                out.push_back(e.slide_id);
            }
        }
        return out;
    }

    void validate() const {
        std::unordered_set<std::string> ids;
        for (const auto& e : slides) {
            if (!ids.insert(e.slide_id).second) {
                throw Error(ErrorKind::InvalidConfig, "slide '" + e.slide_id + "' listed twice in manifest");
            }
        }
        if (slides_in(Split::train).empty()) {
            throw Error(ErrorKind::EmptyTrainSplit, "manifest has no training slide");
        }
        thresholds.validate();
    }
};

/**
 * @brief Per-gene mean expression over the training split.
 */
struct TrainMeanVector {
    std::vector<std::string> gene_ids;
    std::vector<double> means;

    friend bool operator==(const TrainMeanVector&, const TrainMeanVector&) = default;
};

/**
 * @brief Everything known about one slide after loading: coordinates, expression and embeddings, all in the same spot order.
 */
struct Slide {
    std::vector<SpotRecord> spots;
    ExpressionMatrix expression;
    EmbeddingTable embeddings;
    Split split = Split::train;

    const std::string& id() const { return expression.slide_id; }
};

/**
 * Restrict and reorder `spots`, `expression` rows and `embeddings` rows to a common order.
 * The order is the canonical coordinate order, restricted to spots present in the expression matrix.
 */
inline Slide align_slide(std::vector<SpotRecord> spots, ExpressionMatrix expression, const EmbeddingTable& embeddings, Split split) {
    canonicalize_spots(spots);

    std::unordered_map<std::string, std::size_t> expr_row;
    for (std::size_t i = 0; i < expression.spot_ids.size(); ++i) {
        if (!expr_row.emplace(expression.spot_ids[i], i).second) {
            throw Error(ErrorKind::DuplicateSpot, "spot '" + expression.spot_ids[i] + "' repeated in expression of slide '" + expression.slide_id + "'");
        }
    }
    std::unordered_map<std::string, std::size_t> emb_row;
    for (std::size_t i = 0; i < embeddings.spot_ids.size(); ++i) {
        if (!emb_row.emplace(embeddings.spot_ids[i], i).second) {
            throw Error(ErrorKind::DuplicateSpot, "spot '" + embeddings.spot_ids[i] + "' repeated in embeddings of slide '" + expression.slide_id + "'");
        }
    }

    std::unordered_set<std::string> coord_ids;
    for (const auto& s : spots) {
        coord_ids.insert(s.spot_id);
    }
    for (const auto& id : expression.spot_ids) {
        if (!coord_ids.count(id)) {
            throw Error(ErrorKind::MalformedRow, "expression spot '" + id + "' has no coordinates in slide '" + expression.slide_id + "'");
        }
    }

    Slide out;
    out.split = split;
    out.expression.slide_id = expression.slide_id;
    out.expression.gene_ids = expression.gene_ids;
    out.expression.stage = expression.stage;
    out.embeddings.slide_id = expression.slide_id;

    std::vector<std::size_t> expr_order, emb_order;
    for (auto& s : spots) {
        auto eit = expr_row.find(s.spot_id);
        if (eit == expr_row.end()) {
            continue;
        }
        auto mit = emb_row.find(s.spot_id);
        if (mit == emb_row.end()) {
            throw Error(ErrorKind::MissingEmbedding, "spot '" + s.spot_id + "' has no embedding in slide '" + expression.slide_id + "'");
        }
        expr_order.push_back(eit->second);
        emb_order.push_back(mit->second);
        out.spots.push_back(s);
    }

    const std::size_t n = out.spots.size(), g = expression.n_genes(), d = embeddings.d_emb();
    out.expression.values = Matrix(n, g);
    out.embeddings.vectors = Matrix(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        out.expression.spot_ids.push_back(out.spots[i].spot_id);
        out.embeddings.spot_ids.push_back(out.spots[i].spot_id);
        auto src = expression.values.row(expr_order[i]);
        std::copy(src.begin(), src.end(), out.expression.values.row(i).begin());
        auto esrc = embeddings.vectors.row(emb_order[i]);
        std::copy(esrc.begin(), esrc.end(), out.embeddings.vectors.row(i).begin());
    }
    return out;
}

/**
 * @brief Summary produced by `validate_dataset()`.
 */
struct ValidationReport {
    struct SlideSummary {
        std::string slide_id;
        std::size_t n_spots = 0;
        std::size_t n_genes = 0;
        std::size_t d_emb = 0;
    };
    std::vector<SlideSummary> slides;
    std::size_t shared_genes = 0;
    std::size_t d_emb = 0;
};

/**
 * Check that a set of loaded slides is mutually consistent.
 *
 * All slides must carry the same gene set, every spot must have exactly one embedding row,
 * and embedding widths must agree. Spot IDs may not repeat within a slide.
 */
inline ValidationReport validate_dataset(const DatasetManifest& manifest, const std::vector<Slide>& slides) {
    manifest.validate();
    ValidationReport report;
    if (slides.empty()) {
        throw Error(ErrorKind::EmptySplit, "no slides loaded");
    }

    std::vector<std::string> reference = slides.front().expression.gene_ids;
    std::sort(reference.begin(), reference.end());

    for (const auto& slide : slides) {
        slide.expression.validate();
        auto genes = slide.expression.gene_ids;
        std::sort(genes.begin(), genes.end());
        if (genes != reference) {
            std::vector<std::string> diff;
            std::set_symmetric_difference(genes.begin(), genes.end(), reference.begin(), reference.end(), std::back_inserter(diff));
            throw Error(ErrorKind::GeneSetMismatch, "slide '" + slide.id() + "' gene set differs from slide '" + slides.front().id() +
                "' (e.g. '" + (diff.empty() ? std::string("?") : diff.front()) + "')");
        }

        std::unordered_set<std::string> emb_ids;
        for (const auto& id : slide.embeddings.spot_ids) {
            if (!emb_ids.insert(id).second) {
                throw Error(ErrorKind::DuplicateSpot, "embedding for spot '" + id + "' repeated in slide '" + slide.id() + "'");
            }
        }
        for (const auto& s : slide.spots) {
            if (!emb_ids.count(s.spot_id)) {
                throw Error(ErrorKind::MissingEmbedding, "spot '" + s.spot_id + "' has no embedding in slide '" + slide.id() + "'");
            }
        }
        if (report.d_emb == 0) {
            report.d_emb = slide.embeddings.d_emb();
        } else if (report.d_emb != slide.embeddings.d_emb()) {
            throw Error(ErrorKind::WidthMismatch, "embedding width differs in slide '" + slide.id() + "'");
        }
        report.slides.push_back({slide.id(), slide.spots.size(), slide.expression.n_genes(), slide.embeddings.d_emb()});
    }
    report.shared_genes = reference.size();
    return report;
}

/**
 * Run `fn(i)` for every `i` in `[0, n)` using up to `threads` workers.
 * Work is split into contiguous blocks, so any per-index result written by `fn` is independent of the thread count.
 */
template<class Function_>
void parallel_for(std::size_t n, int threads, Function_ fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    const std::size_t block = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            try {
                const std::size_t start = w * block, end = std::min(n, start + block);
                for (std::size_t i = start; i < end; ++i) {
                    fn(i);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

}

#endif
