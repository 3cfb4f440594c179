#ifndef SEPAL_DENOISE_HPP
#define SEPAL_DENOISE_HPP

#include "core.hpp"
#include "ingest.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <vector>

/**
 * @file denoise.hpp
 *
 * @brief Adaptive median imputation of pepper noise (spurious zeros) in gene maps.
 */

namespace sepal {

/**
 * @brief Rings of neighbours around each spot, grouped by unique pixel distance.
 */
struct RadialNeighborhood {
    struct Ring {
        double distance = 0;
        std::vector<std::size_t> members;
    };

    static constexpr std::size_t default_max_rings = 7;

    std::size_t max_rings = default_max_rings;
    std::vector<std::vector<Ring>> rings; // per spot, ascending distance

    std::size_t n_spots() const { return rings.size(); }
};

/**
 * Bucket every other spot by its Euclidean pixel distance (rounded to 6 decimals) to each spot,
 * keeping only the first `max_rings` unique distances.
 */
inline RadialNeighborhood build_radial_index(const std::vector<SpotRecord>& coords, std::size_t max_rings = RadialNeighborhood::default_max_rings) {
    const std::size_t n = coords.size();
    if (n < 2) {
        throw Error(ErrorKind::DegenerateCoordinates, "radial index needs at least two spots");
    }
    RadialNeighborhood index;
    index.max_rings = max_rings;
    index.rings.resize(n);

    for (std::size_t i = 0; i < n; ++i) {
        std::map<long long, std::vector<std::size_t>> buckets;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) {
                continue;
            }
            const double d = std::hypot(coords[i].pixel_x - coords[j].pixel_x, coords[i].pixel_y - coords[j].pixel_y);
            const long long key = std::llround(d * 1e6);
            if (key == 0) {
                throw Error(ErrorKind::DegenerateCoordinates, "spots '" + coords[i].spot_id + "' and '" + coords[j].spot_id + "' share pixel coordinates");
            }
            buckets[key].push_back(j);
        }
        auto& out = index.rings[i];
        for (auto& [key, members] : buckets) {
            if (out.size() == max_rings) {
                break;
            }
            out.push_back({static_cast<double>(key) / 1e6, std::move(members)});
        }
    }
    return index;
}

/**
 * Median of `values`, taking the mean of the middle pair for even counts. `values` is reordered.
 */
inline double median_inplace(std::vector<double>& values) {
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n % 2 == 1) {
        return values[n / 2];
    }
    return (values[n / 2 - 1] + values[n / 2]) / 2.0;
}

/**
 * @brief Result of imputing one gene map.
 */
struct ImputedMap {
    std::vector<double> values;
    std::vector<std::uint8_t> imputed;
    std::size_t n_imputed = 0;
    std::size_t fallback_count = 0;   // zeros filled from the whole-slide median
    bool nothing_to_impute_from = false; // the map was entirely zero
};

/**
 * Replace each zero in a gene map by the median of the nonzero values in a growing region around it.
 *
 * The region is the union of rings 1..r, grown one ring at a time; the first region holding at least one nonzero value is used.
 * Medians always come from the original map, so the result does not depend on spot order.
 * If no ring up to the last retained one has a nonzero value, the median of all nonzero entries of the map is used.
 * An all-zero map is returned unchanged and flagged.
 */
inline ImputedMap adaptive_median_impute(std::span<const double> map, const RadialNeighborhood& index) {
    const std::size_t n = map.size();
    if (n != index.n_spots()) {
        throw Error(ErrorKind::ShapeMismatch, "gene map length does not match the radial index");
    }
    ImputedMap out;
    out.values.assign(map.begin(), map.end());
    out.imputed.assign(n, 0);

    std::vector<double> nonzero_all;
    for (double v : map) {
        if (v < 0) {
            throw Error(ErrorKind::NegativeValue, "denoising requires nonnegative values");
        }
        if (v != 0) {
            nonzero_all.push_back(v);
        }
    }
    if (nonzero_all.size() == n) {
        return out;
    }
    if (nonzero_all.empty()) {
        out.nothing_to_impute_from = true;
        return out;
    }
    std::optional<double> slide_median;

    std::vector<double> region;
    for (std::size_t i = 0; i < n; ++i) {
        if (map[i] != 0) {
            continue;
        }
        region.clear();
        bool found = false;
        for (const auto& ring : index.rings[i]) {
            for (auto j : ring.members) {
                if (map[j] != 0) {
                    region.push_back(map[j]);
                }
            }
            if (!region.empty()) {
                found = true;
                break;
            }
        }
        if (found) {
            out.values[i] = median_inplace(region);
        } else {
            if (!slide_median) {
                auto copy = nonzero_all;
                slide_median = median_inplace(copy);
            }
            out.values[i] = *slide_median;
            ++out.fallback_count;
        }
        out.imputed[i] = 1;
        ++out.n_imputed;
    }
    return out;
}

/**
 * @brief Per-gene imputation counts and the pooled imputation rate.
 */
struct ImputationReport {
    struct Row {
        std::string slide_id;
        std::string gene_id;
        std::size_t n_imputed = 0;
        std::size_t fallback_count = 0;
        bool nothing_to_impute_from = false;
    };
    std::vector<Row> rows;
    std::size_t total_cells = 0;
    std::size_t total_imputed = 0;

    double imputed_fraction() const {
        return total_cells ? static_cast<double>(total_imputed) / static_cast<double>(total_cells) : 0.0;
    }
};

struct DenoiseResult {
    std::vector<ExpressionMatrix> matrices;
    std::vector<ImputationMask> masks;
    ImputationReport report;
};

/**
 * Impute every gene map of every slide.
 *
 * @param matrices Log-transformed expression per slide.
 * @param coords Coordinates per slide, in the same spot order as the matching matrix.
 * @param threads Worker count; results are identical for any value.
 */
inline DenoiseResult denoise_dataset(const std::vector<ExpressionMatrix>& matrices, const std::vector<std::vector<SpotRecord>>& coords, int threads = 1) {
    if (matrices.size() != coords.size()) {
        throw Error(ErrorKind::ShapeMismatch, "one coordinate table per slide is required");
    }
    DenoiseResult result;
    for (std::size_t s = 0; s < matrices.size(); ++s) {
        const auto& m = matrices[s];
        require_stage(m.stage, {Stage::log1p}, "denoising");
        if (coords[s].size() != m.n_spots()) {
            throw Error(ErrorKind::ShapeMismatch, "coordinates and expression of slide '" + m.slide_id + "' have different spot counts");
        }
        for (std::size_t i = 0; i < m.n_spots(); ++i) {
            if (coords[s][i].spot_id != m.spot_ids[i]) {
                throw Error(ErrorKind::ShapeMismatch, "coordinates and expression of slide '" + m.slide_id + "' are not in the same spot order");
            }
        }

        const auto index = build_radial_index(coords[s]);
        ExpressionMatrix out = m;
        out.stage = Stage::denoised;
        auto mask = ImputationMask::empty_like(m);
        std::vector<ImputationReport::Row> rows(m.n_genes());

        parallel_for(m.n_genes(), threads, [&](std::size_t g) {
            std::vector<double> gene_map(m.n_spots());
            for (std::size_t i = 0; i < m.n_spots(); ++i) {
                gene_map[i] = m.values(i, g);
            }
            auto imp = adaptive_median_impute(gene_map, index);
            for (std::size_t i = 0; i < m.n_spots(); ++i) {
                out.values(i, g) = imp.values[i];
                mask.values(i, g) = imp.imputed[i];
            }
            rows[g] = {m.slide_id, m.gene_ids[g], imp.n_imputed, imp.fallback_count, imp.nothing_to_impute_from};
        });

        for (auto& r : rows) {
            result.report.total_imputed += r.n_imputed;
            result.report.rows.push_back(std::move(r));
        }
        result.report.total_cells += m.values.size();
        check_mask_shape(mask, out);
        result.matrices.push_back(std::move(out));
        result.masks.push_back(std::move(mask));
    }
    return result;
}

inline void write_imputation_report(const std::string& path, const ImputationReport& report) {
    Table t{"imputation_report", {"slide_id", "gene_id", "n_imputed", "fallback_count", "nothing_to_impute_from"}, {}};
    for (const auto& r : report.rows) {
        t.rows.push_back({r.slide_id, r.gene_id, std::to_string(r.n_imputed), std::to_string(r.fallback_count), r.nothing_to_impute_from ? "1" : "0"});
    }
    write_table(path, t);
}

inline void write_imputation_summary(const std::string& path, const ImputationReport& report) {
    Table t{"imputation_summary", {"total_cells", "total_imputed", "imputed_fraction"}, {}};
    t.rows.push_back({std::to_string(report.total_cells), std::to_string(report.total_imputed), format_real(report.imputed_fraction())});
    write_table(path, t);
}

}

#endif
