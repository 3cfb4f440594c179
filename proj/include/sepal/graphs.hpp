#ifndef SEPAL_GRAPHS_HPP
#define SEPAL_GRAPHS_HPP

#include "core.hpp"
#include "ingest.hpp"
#include "spatial.hpp"

#include <cmath>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

/**
 * @file graphs.hpp
 *
 * @brief Local neighbourhood graphs around each spot, with positional encodings mixed into the node features.
 */

namespace sepal {

enum class Aggregation { sum, concat };

inline const char* to_string(Aggregation a) {
    return a == Aggregation::sum ? "sum" : "concat";
}

inline std::optional<Aggregation> parse_aggregation(const std::string& text) {
    if (text == "sum") {
        return Aggregation::sum;
    }
    if (text == "concat") {
        return Aggregation::concat;
    }
    return std::nullopt;
}

/**
 * @brief Nodes within a fixed hop distance of a center spot, with the induced edges.
 *
 * Node 0 is always the center; nodes are listed in breadth-first order.
 */
struct Subgraph {
    std::vector<std::size_t> nodes;  // global spot indices
    std::vector<std::size_t> hops;   // hop distance of each node from the center
    std::vector<std::pair<std::size_t, std::size_t>> edges; // local indices, first < second
};

/**
 * Breadth-first expansion from `center` to depth `hops` over sorted neighbour lists.
 * The edge set is every adjacency edge between two selected nodes.
 */
inline Subgraph khop_subgraph(const std::vector<std::vector<std::size_t>>& neighbors, std::size_t center, std::size_t hops) {
    if (hops < 1) {
        throw Error(ErrorKind::InvalidConfig, "hop count must be at least 1");
    }
    if (center >= neighbors.size()) {
        throw Error(ErrorKind::ShapeMismatch, "center index out of range");
    }
    Subgraph out;
    std::unordered_map<std::size_t, std::size_t> local;
    out.nodes.push_back(center);
    out.hops.push_back(0);
    local[center] = 0;
    for (std::size_t head = 0; head < out.nodes.size(); ++head) {
        if (out.hops[head] == hops) {
            continue;
        }
        for (auto nb : neighbors[out.nodes[head]]) {
            if (local.emplace(nb, out.nodes.size()).second) {
                out.nodes.push_back(nb);
                out.hops.push_back(out.hops[head] + 1);
            }
        }
    }
    for (std::size_t a = 0; a < out.nodes.size(); ++a) {
        for (auto nb : neighbors[out.nodes[a]]) {
            auto it = local.find(nb);
            if (it != local.end() && it->second > a) {
                out.edges.emplace_back(a, it->second);
            }
        }
    }
    std::sort(out.edges.begin(), out.edges.end());
    return out;
}

inline Subgraph khop_subgraph(const Adjacency& adj, std::size_t center, std::size_t hops) {
    return khop_subgraph(adj.neighbors(), center, hops);
}

inline constexpr double positional_base = 10000.0;

/**
 * Two-dimensional sinusoidal encoding of a relative grid offset.
 *
 * The first half of the vector encodes `rel_col` and the second half `rel_row`.
 * Within a half, entries `2i` and `2i + 1` hold `sin(p / 10000^(4i/d))` and `cos(p / 10000^(4i/d))` for `i < d/4`.
 */
inline std::vector<double> positional_encoding(double rel_row, double rel_col, std::size_t d_emb) {
    if (d_emb == 0 || d_emb % 4 != 0) {
        throw Error(ErrorKind::WidthNotDivisible, "positional encoding width " + std::to_string(d_emb) + " is not a positive multiple of 4");
    }
    std::vector<double> out(d_emb);
    const std::size_t quarter = d_emb / 4, half = d_emb / 2;
    for (std::size_t i = 0; i < quarter; ++i) {
        const double freq = std::pow(positional_base, 4.0 * static_cast<double>(i) / static_cast<double>(d_emb));
        out[2 * i] = std::sin(rel_col / freq);
        out[2 * i + 1] = std::cos(rel_col / freq);
        out[half + 2 * i] = std::sin(rel_row / freq);
        out[half + 2 * i + 1] = std::cos(rel_row / freq);
    }
    return out;
}

/**
 * @brief Input graph of the spatial model for one center spot.
 */
struct SpotGraph {
    std::size_t center_index = 0;
    std::vector<std::size_t> nodes;
    std::vector<std::size_t> hops;
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    Matrix features;

    std::size_t n_nodes() const { return nodes.size(); }
};

/**
 * Build node features for a subgraph: each node's embedding combined with the positional encoding of its
 * array offset from the center, either added (`sum`) or appended (`concat`).
 *
 * @param spots Coordinates of the slide, aligned with the rows of `embeddings`.
 */
inline SpotGraph assemble_graph(const EmbeddingTable& embeddings, const std::vector<SpotRecord>& spots, const Subgraph& sub, Aggregation aggregation) {
    const std::size_t d = embeddings.d_emb();
    if (embeddings.vectors.rows() != spots.size()) {
        throw Error(ErrorKind::MissingEmbedding, "embedding rows do not cover every spot");
    }
    SpotGraph g;
    g.center_index = sub.nodes.front();
    g.nodes = sub.nodes;
    g.hops = sub.hops;
    g.edges = sub.edges;
    g.features = Matrix(sub.nodes.size(), aggregation == Aggregation::sum ? d : 2 * d);

    const auto& center = spots[g.center_index];
    for (std::size_t a = 0; a < sub.nodes.size(); ++a) {
        const auto idx = sub.nodes[a];
        if (idx >= embeddings.spot_ids.size() || embeddings.spot_ids[idx] != spots[idx].spot_id) {
            throw Error(ErrorKind::MissingEmbedding, "no embedding for spot '" + spots[idx].spot_id + "'");
        }
        auto pos = positional_encoding(static_cast<double>(spots[idx].array_row - center.array_row),
                                       static_cast<double>(spots[idx].array_col - center.array_col), d);
        auto emb = embeddings.vectors.row(idx);
        auto row = g.features.row(a);
        if (aggregation == Aggregation::sum) {
            for (std::size_t k = 0; k < d; ++k) {
                row[k] = emb[k] + pos[k];
            }
        } else {
            for (std::size_t k = 0; k < d; ++k) {
                row[k] = emb[k];
                row[d + k] = pos[k];
            }
        }
    }
    return g;
}

/**
 * One graph per spot of a slide, in spot order.
 */
inline std::vector<SpotGraph> build_graphs(const Slide& slide, const Adjacency& adj, std::size_t hops, Aggregation aggregation, int threads = 1) {
    const auto neighbors = adj.neighbors();
    std::vector<SpotGraph> out(slide.spots.size());
    parallel_for(out.size(), threads, [&](std::size_t i) {
        out[i] = assemble_graph(slide.embeddings, slide.spots, khop_subgraph(neighbors, i, hops), aggregation);
    });
    return out;
}

/**
 * Human-readable dump of graphs, one block per center spot.
 */
inline void write_graph_dump(const std::string& path, const std::vector<SpotGraph>& graphs, const std::vector<SpotRecord>& spots) {
    std::string body = std::string("#sepal_format=") + format_version + "\n#kind=graph_dump\n";
    for (const auto& g : graphs) {
        body += "graph\t" + spots[g.center_index].spot_id + "\tnodes=" + std::to_string(g.n_nodes()) + "\tedges=" + std::to_string(g.edges.size()) +
            "\tfeatures=" + std::to_string(g.features.cols()) + "\n";
        for (std::size_t a = 0; a < g.n_nodes(); ++a) {
            body += "node\t" + std::to_string(a) + "\t" + spots[g.nodes[a]].spot_id + "\thop=" + std::to_string(g.hops[a]) + "\n";
        }
        for (auto [a, b] : g.edges) {
            body += "edge\t" + std::to_string(a) + "\t" + std::to_string(b) + "\n";
        }
    }
    detail::write_file(path, body);
}

}

#endif
