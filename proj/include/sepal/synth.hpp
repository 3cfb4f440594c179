#ifndef SEPAL_SYNTH_HPP
#define SEPAL_SYNTH_HPP

#include "core.hpp"
#include "ingest.hpp"
#include "nn.hpp"
#include "spatial.hpp"

#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

/**
 * @file synth.hpp
 *
 * @brief Seeded synthetic datasets with a known split between spatially structured and noise genes.
 */

namespace sepal {

/**
 * @brief Parameters of the synthetic generator.
 *
 * The first `n_smooth` genes (`smooth_000`, ...) follow
 * `offset + field_amplitude * sin(...) + neighbor_amplitude * B_g . mean(neighbour embeddings) + noise_sd * N(0, 1)`,
 * where the neighbour mean excludes the spot itself and `B_g ~ N(0, 1/d_emb)`.
 * The remaining genes (`noise_000`, ...) are `offset + N(0, 1)`.
 * Values are clamped at zero and tagged as log-transformed expression.
 */
struct SynthConfig {
    std::size_t grid_rows = 20;
    std::size_t grid_cols = 20;
    std::size_t d_emb = 16;
    std::size_t n_genes = 256;
    std::size_t n_smooth = 50;
    double noise_sd = 0.1;
    std::uint64_t seed = 1;

    Geometry geometry = Geometry::square_grid;
    std::size_t n_train = 1;
    std::size_t n_val = 1;
    std::size_t n_test = 1;
    double offset = 5.0;
    double field_amplitude = 1.0;
    double neighbor_amplitude = 1.0;
    double zero_fraction = 0.0; // exactly floor(zero_fraction * n_spots) zeros per gene and slide

    void validate() const {
        if (grid_rows == 0 || grid_cols == 0 || d_emb == 0 || n_genes == 0) {
            throw Error(ErrorKind::InvalidConfig, "synthetic dimensions must be positive");
        }
        if (n_smooth > n_genes) {
            throw Error(ErrorKind::InvalidConfig, "more smooth genes than genes");
        }
        if (n_train + n_val + n_test == 0) {
            throw Error(ErrorKind::InvalidConfig, "synthetic dataset needs at least one slide");
        }
        if (!(zero_fraction >= 0 && zero_fraction <= 1) || !(noise_sd >= 0)) {
            throw Error(ErrorKind::InvalidConfig, "zero fraction must lie in [0, 1] and noise_sd must be nonnegative");
        }
        if (geometry == Geometry::auto_radius) {
            throw Error(ErrorKind::InvalidConfig, "synthetic grids are square_grid or hex_array");
        }
    }
};

struct SynthDataset {
    std::vector<Slide> slides; // expression at the log1p stage
    std::vector<std::string> smooth_genes;
};

namespace detail {

inline std::string padded(std::size_t i, std::size_t width = 3) {
    auto s = std::to_string(i);
    return std::string(s.size() < width ? width - s.size() : 0, '0') + s;
}

inline std::vector<SpotRecord> synth_grid(const SynthConfig& cfg, const std::string& slide_id) {
    std::vector<SpotRecord> spots;
    const double row_pitch = cfg.geometry == Geometry::hex_array ? 100.0 * std::sqrt(3.0) / 2.0 : 100.0;
    for (std::size_t r = 0; r < cfg.grid_rows; ++r) {
        for (std::size_t c = 0; c < cfg.grid_cols; ++c) {
            SpotRecord s;
            s.slide_id = slide_id;
            s.spot_id = "r" + padded(r) + "c" + padded(c);
            s.array_row = static_cast<long>(r);
            if (cfg.geometry == Geometry::hex_array) {
                s.array_col = static_cast<long>(2 * c + r % 2);
                s.pixel_x = static_cast<double>(s.array_col) * 50.0;
            } else {
                s.array_col = static_cast<long>(c);
                s.pixel_x = static_cast<double>(c) * 100.0;
            }
            s.pixel_y = static_cast<double>(r) * row_pitch;
            spots.push_back(std::move(s));
        }
    }
    canonicalize_spots(spots);
    return spots;
}

}

/**
 * Generate a dataset in memory. Identical configurations give identical datasets.
 */
inline SynthDataset generate_synth(const SynthConfig& cfg) {
    cfg.validate();
    nn::Rng rng(cfg.seed);
    const std::size_t d = cfg.d_emb;

    std::vector<std::string> genes;
    SynthDataset out;
    for (std::size_t g = 0; g < cfg.n_genes; ++g) {
        if (g < cfg.n_smooth) {
            genes.push_back("smooth_" + detail::padded(g));
            out.smooth_genes.push_back(genes.back());
        } else {
            genes.push_back("noise_" + detail::padded(g - cfg.n_smooth));
        }
    }

    // Per-gene parameters shared by all slides.
    struct FieldParams {
        double freq_row, freq_col, phase;
    };
    std::vector<FieldParams> fields(cfg.n_smooth);
    Matrix projection(cfg.n_smooth, d);
    for (std::size_t g = 0; g < cfg.n_smooth; ++g) {
        fields[g].freq_row = rng.uniform(0.5, 1.5);
        fields[g].freq_col = rng.uniform(0.5, 1.5);
        fields[g].phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        for (std::size_t k = 0; k < d; ++k) {
            projection(g, k) = rng.normal() / std::sqrt(static_cast<double>(d));
        }
    }

    const std::size_t n_slides = cfg.n_train + cfg.n_val + cfg.n_test;
    for (std::size_t s = 0; s < n_slides; ++s) {
        Split split = s < cfg.n_train ? Split::train : (s < cfg.n_train + cfg.n_val ? Split::val : Split::test);
        const std::string slide_id = std::string(to_string(split)) + std::to_string(s < cfg.n_train ? s : (s < cfg.n_train + cfg.n_val ? s - cfg.n_train : s - cfg.n_train - cfg.n_val));

        Slide slide;
        slide.split = split;
        slide.spots = detail::synth_grid(cfg, slide_id);
        const std::size_t n = slide.spots.size();

        slide.embeddings.slide_id = slide_id;
        slide.embeddings.vectors = Matrix(n, d);
        for (std::size_t i = 0; i < n; ++i) {
            slide.embeddings.spot_ids.push_back(slide.spots[i].spot_id);
            for (std::size_t k = 0; k < d; ++k) {
                slide.embeddings.vectors(i, k) = rng.normal();
            }
        }

        Matrix neighbor_mean(n, d);
        if (n > 1) {
            const auto nbs = build_adjacency(slide.spots, cfg.geometry).neighbors();
            for (std::size_t i = 0; i < n; ++i) {
                if (nbs[i].empty()) {
                    continue;
                }
                for (auto j : nbs[i]) {
                    for (std::size_t k = 0; k < d; ++k) {
                        neighbor_mean(i, k) += slide.embeddings.vectors(j, k);
                    }
                }
                for (std::size_t k = 0; k < d; ++k) {
                    neighbor_mean(i, k) /= static_cast<double>(nbs[i].size());
                }
            }
        }

        auto& expr = slide.expression;
        expr.slide_id = slide_id;
        expr.gene_ids = genes;
        expr.stage = Stage::log1p;
        expr.values = Matrix(n, cfg.n_genes);
        for (const auto& sp : slide.spots) {
            expr.spot_ids.push_back(sp.spot_id);
        }
        const double two_pi = 2.0 * std::numbers::pi;
        const double rows = static_cast<double>(cfg.grid_rows), cols = static_cast<double>(cfg.grid_cols);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& sp = slide.spots[i];
            const double r = static_cast<double>(sp.array_row) / rows;
            const double c = static_cast<double>(cfg.geometry == Geometry::hex_array ? sp.array_col / 2 : sp.array_col) / cols;
            for (std::size_t g = 0; g < cfg.n_genes; ++g) {
                double v = cfg.offset;
                if (g < cfg.n_smooth) {
                    const auto& f = fields[g];
                    v += cfg.field_amplitude * std::sin(two_pi * (f.freq_row * r + f.freq_col * c) + f.phase);
                    double proj = 0;
                    for (std::size_t k = 0; k < d; ++k) {
                        proj += projection(g, k) * neighbor_mean(i, k);
                    }
                    v += cfg.neighbor_amplitude * proj + cfg.noise_sd * rng.normal();
                } else {
                    v += rng.normal();
                }
                expr.values(i, g) = std::max(0.0, v);
            }
        }

        const auto n_zero = static_cast<std::size_t>(std::floor(cfg.zero_fraction * static_cast<double>(n)));
        if (n_zero) {
            std::vector<std::size_t> order(n);
            for (std::size_t g = 0; g < cfg.n_genes; ++g) {
                std::iota(order.begin(), order.end(), 0);
                rng.shuffle(order);
                for (std::size_t z = 0; z < n_zero; ++z) {
                    expr.values(order[z], g) = 0;
                }
            }
        }
        out.slides.push_back(std::move(slide));
    }
    return out;
}

/**
 * Integer counts whose log transform approximates a log-scale matrix: `round(2^y - 1)`.
 */
inline ExpressionMatrix to_counts(const ExpressionMatrix& logged) {
    ExpressionMatrix out = logged;
    out.stage = Stage::raw_counts;
    for (auto& v : out.values.data()) {
        v = static_cast<double>(std::llround(std::exp2(v) - 1.0));
    }
    return out;
}

/**
 * Write a synthetic dataset: per slide coordinates, embeddings, raw counts (`<id>.counts.tsv`, referenced by the
 * manifest) and the log-scale values (`<id>.log1p.tsv`), plus `manifest.toml`.
 *
 * @return Path of the manifest.
 */
inline std::string cmd_synth(const SynthConfig& cfg, const std::string& out_dir) {
    auto data = generate_synth(cfg);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) {
        throw Error(ErrorKind::IoFailure, "cannot create '" + out_dir + "'");
    }
    const std::filesystem::path dir(out_dir);

    DatasetManifest manifest;
    manifest.name = "synthetic";
    manifest.geometry = cfg.geometry;
    manifest.n_genes_select = std::min<std::size_t>(cfg.n_genes, std::max<std::size_t>(cfg.n_smooth, 1));
    manifest.thresholds.min_spot_counts = 0;
    manifest.thresholds.max_spot_counts = std::numeric_limits<double>::infinity();
    manifest.thresholds.min_gene_counts = 0;
    manifest.thresholds.max_gene_counts = std::numeric_limits<double>::infinity();
    manifest.thresholds.eps_total = 0;
    manifest.thresholds.eps_wsi = 0;

    for (const auto& slide : data.slides) {
        const auto& id = slide.id();
        write_coordinates((dir / (id + ".coords.tsv")).string(), slide.spots);
        write_embeddings((dir / (id + ".emb.tsv")).string(), slide.embeddings);
        write_expression((dir / (id + ".log1p.tsv")).string(), slide.expression);
        write_expression((dir / (id + ".counts.tsv")).string(), to_counts(slide.expression));
        manifest.slides.push_back({id, id + ".coords.tsv", id + ".counts.tsv", id + ".emb.tsv", slide.split});
    }
    const auto path = (dir / "manifest.toml").string();
    write_manifest(path, manifest);
    return path;
}

}

#endif
