#ifndef SEPAL_SPATIAL_HPP
#define SEPAL_SPATIAL_HPP

#include "core.hpp"
#include "ingest.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <unordered_set>
#include <vector>

/**
 * @file spatial.hpp
 *
 * @brief Spot adjacency graphs, Moran's I and selection of spatially patterned genes.
 */

namespace sepal {

/**
 * @brief Undirected, unweighted spot graph of one slide.
 *
 * Edges are stored once as `(i, j)` with `i < j`.
 */
struct Adjacency {
    std::string slide_id;
    std::size_t n_spots = 0;
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    Geometry geometry = Geometry::hex_array;

    /** Neighbour lists, each sorted ascending. */
    std::vector<std::vector<std::size_t>> neighbors() const {
        std::vector<std::vector<std::size_t>> out(n_spots);
        for (auto [i, j] : edges) {
            out[i].push_back(j);
            out[j].push_back(i);
        }
        for (auto& n : out) {
            std::sort(n.begin(), n.end());
        }
        return out;
    }

    std::vector<std::size_t> degrees() const {
        std::vector<std::size_t> out(n_spots, 0);
        for (auto [i, j] : edges) {
            ++out[i];
            ++out[j];
        }
        return out;
    }
};

inline constexpr double auto_radius_factor = 1.3;

/**
 * Connect spots according to the slide geometry.
 *
 * - `hex_array`: array offsets (0, ±2) and (±1, ±1), the six lattice neighbours of the Visium layout.
 * - `square_grid`: array offsets (0, ±1) and (±1, 0).
 * - `auto_radius`: pixel distance at most 1.3 times the minimum pairwise distance.
 */
inline Adjacency build_adjacency(const std::vector<SpotRecord>& coords, Geometry geometry) {
    const std::size_t n = coords.size();
    if (n < 2) {
        throw Error(ErrorKind::DegenerateCoordinates, "adjacency needs at least two spots");
    }
    Adjacency adj;
    adj.slide_id = coords.front().slide_id;
    adj.n_spots = n;
    adj.geometry = geometry;

    if (geometry == Geometry::auto_radius) {
        double min_dist = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                min_dist = std::min(min_dist, std::hypot(coords[i].pixel_x - coords[j].pixel_x, coords[i].pixel_y - coords[j].pixel_y));
            }
        }
        if (!(min_dist > 0)) {
            throw Error(ErrorKind::DegenerateCoordinates, "coincident spot coordinates in slide '" + adj.slide_id + "'");
        }
        const double cutoff = auto_radius_factor * min_dist;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                if (std::hypot(coords[i].pixel_x - coords[j].pixel_x, coords[i].pixel_y - coords[j].pixel_y) <= cutoff) {
                    adj.edges.emplace_back(i, j);
                }
            }
        }
        return adj;
    }

    std::map<std::pair<long, long>, std::size_t> position;
    for (std::size_t i = 0; i < n; ++i) {
        if (!position.emplace(std::make_pair(coords[i].array_row, coords[i].array_col), i).second) {
            throw Error(ErrorKind::DegenerateCoordinates, "two spots share array position in slide '" + adj.slide_id + "'");
        }
    }

    static constexpr std::pair<long, long> hex_offsets[] = {{0, 2}, {0, -2}, {1, 1}, {1, -1}, {-1, 1}, {-1, -1}};
    static constexpr std::pair<long, long> square_offsets[] = {{0, 1}, {0, -1}, {1, 0}, {-1, 0}};
    std::span<const std::pair<long, long>> offsets = (geometry == Geometry::hex_array) ?
        std::span<const std::pair<long, long>>(hex_offsets) : std::span<const std::pair<long, long>>(square_offsets);

    for (std::size_t i = 0; i < n; ++i) {
        for (auto [dr, dc] : offsets) {
            auto it = position.find({coords[i].array_row + dr, coords[i].array_col + dc});
            if (it != position.end() && it->second > i) {
                adj.edges.emplace_back(i, it->second);
            }
        }
    }
    std::sort(adj.edges.begin(), adj.edges.end());
    return adj;
}

/**
 * Moran's I of a map over binary symmetric weights:
 * `I = (N / W) * sum_ij w_ij (x_i - m)(x_j - m) / sum_i (x_i - m)^2`, with `W = 2 |E|`.
 *
 * @return `std::nullopt` when the map is constant.
 */
inline std::optional<double> morans_i(std::span<const double> values, const Adjacency& adj) {
    if (adj.edges.empty()) {
        throw Error(ErrorKind::EmptyAdjacency, "Moran's I needs at least one edge");
    }
    if (values.size() != adj.n_spots) {
        throw Error(ErrorKind::ShapeMismatch, "map length does not match adjacency");
    }
    if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); })) {
        return std::nullopt;
    }
    const double n = static_cast<double>(values.size());
    double mean = 0;
    for (double v : values) {
        mean += v;
    }
    mean /= n;

    double denom = 0;
    for (double v : values) {
        denom += (v - mean) * (v - mean);
    }

    double numer = 0;
    for (auto [i, j] : adj.edges) {
        numer += (values[i] - mean) * (values[j] - mean);
    }
    numer *= 2; // each undirected edge appears twice in the double sum
    const double total_weight = 2.0 * static_cast<double>(adj.edges.size());
    return (n / total_weight) * numer / denom;
}

/**
 * @brief Moran's I of one gene on every slide, and its average over slides where it is defined.
 */
struct MoranScore {
    std::string gene_id;
    std::vector<std::optional<double>> per_slide;
    std::optional<double> mean_i;
};

struct GeneSelection {
    std::vector<std::string> selected;
    std::vector<MoranScore> ranked; // every gene, best first
};

/**
 * Rank genes by their slide-averaged Moran's I and keep the top `n_genes`.
 *
 * Genes undefined on every slide rank last; ties are broken by gene ID.
 */
inline GeneSelection select_genes(const std::vector<ExpressionMatrix>& matrices, const std::vector<Adjacency>& adjacencies, std::size_t n_genes, int threads = 1) {
    if (matrices.empty() || matrices.size() != adjacencies.size()) {
        throw Error(ErrorKind::ShapeMismatch, "one adjacency per slide is required");
    }
    const auto& genes = matrices.front().gene_ids;
    for (const auto& m : matrices) {
        require_stage(m.stage, {Stage::denoised}, "gene selection");
        if (m.gene_ids != genes) {
            throw Error(ErrorKind::GeneSetMismatch, "slide '" + m.slide_id + "' gene columns differ");
        }
    }
    if (genes.size() < n_genes) {
        throw Error(ErrorKind::TooFewGenes, "only " + std::to_string(genes.size()) + " genes available, " + std::to_string(n_genes) + " requested");
    }

    std::vector<MoranScore> scores(genes.size());
    parallel_for(genes.size(), threads, [&](std::size_t g) {
        MoranScore score;
        score.gene_id = genes[g];
        double sum = 0;
        std::size_t defined = 0;
        std::vector<double> map;
        for (std::size_t s = 0; s < matrices.size(); ++s) {
            const auto& m = matrices[s];
            map.resize(m.n_spots());
            for (std::size_t i = 0; i < m.n_spots(); ++i) {
                map[i] = m.values(i, g);
            }
            auto value = morans_i(map, adjacencies[s]);
            score.per_slide.push_back(value);
            if (value) {
                sum += *value;
                ++defined;
            }
        }
        if (defined) {
            score.mean_i = sum / static_cast<double>(defined);
        }
        scores[g] = std::move(score);
    });

    std::sort(scores.begin(), scores.end(), [](const MoranScore& a, const MoranScore& b) {
        if (a.mean_i.has_value() != b.mean_i.has_value()) {
            return a.mean_i.has_value();
        }
        if (a.mean_i && *a.mean_i != *b.mean_i) {
            return *a.mean_i > *b.mean_i;
        }
        return a.gene_id < b.gene_id;
    });

    GeneSelection out;
    for (std::size_t g = 0; g < n_genes; ++g) {
        out.selected.push_back(scores[g].gene_id);
    }
    out.ranked = std::move(scores);
    return out;
}

inline void write_moran_scores(const std::string& path, const GeneSelection& selection, const std::vector<std::string>& slide_ids) {
    Table t;
    t.kind = "moran_scores";
    t.columns = {"gene_id"};
    for (const auto& s : slide_ids) {
        t.columns.push_back("I_" + s);
    }
    t.columns.push_back("mean_I");
    t.columns.push_back("selected");
    std::unordered_set<std::string> chosen(selection.selected.begin(), selection.selected.end());
    auto fmt = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string("NA"); };
    for (const auto& score : selection.ranked) {
        std::vector<std::string> row{score.gene_id};
        for (const auto& v : score.per_slide) {
            row.push_back(fmt(v));
        }
        row.push_back(fmt(score.mean_i));
        row.push_back(chosen.count(score.gene_id) ? "1" : "0");
        t.rows.push_back(std::move(row));
    }
    write_table(path, t);
}

}

#endif
