#include <gtest/gtest.h>

#include "helpers.hpp"
#include "oracles.hpp"
#include "sepal/graphs.hpp"

#include <cmath>
#include <set>

using namespace sepal;

using testing_support::bfs_distances;

namespace {

Slide lattice_slide(const std::vector<SpotRecord>& spots, std::size_t d) {
    Slide s;
    s.spots = spots;
    s.expression.slide_id = "s";
    s.embeddings.vectors = Matrix(spots.size(), d);
    std::mt19937_64 rng(0);
    s.embeddings.vectors = testing_support::random_matrix(spots.size(), d, rng);
    for (auto& sp : spots) {
        s.embeddings.spot_ids.push_back(sp.spot_id);
    }
    return s;
}

}

TEST(KHop, HexInteriorCounts) {
    auto spots = testing_support::hex_lattice(9, 9);
    auto adj = build_adjacency(spots, Geometry::hex_array);
    auto c = testing_support::index_of(spots, 4, 8);
    auto one = khop_subgraph(adj, c, 1);
    EXPECT_EQ(one.nodes.size(), 7u);
    EXPECT_EQ(one.nodes.front(), c);
    // 6 spokes plus the 6 ring edges between consecutive neighbours.
    EXPECT_EQ(one.edges.size(), 12u);
    EXPECT_EQ(khop_subgraph(adj, c, 2).nodes.size(), 19u);
}

TEST(KHop, IsolatedNode) {
    std::vector<std::vector<std::size_t>> nbs{{}, {2}, {1}};
    auto g = khop_subgraph(nbs, 0, 3);
    EXPECT_EQ(g.nodes, std::vector<std::size_t>{0});
    EXPECT_TRUE(g.edges.empty());
    EXPECT_THROW(khop_subgraph(nbs, 0, 0), Error);
}

TEST(KHop, MatchesBfsOracle) {
    std::mt19937_64 rng(21);
    for (int t = 0; t < 20; ++t) {
        const std::size_t n = 40;
        auto edges = testing_support::random_edges(n, 0.06, rng);
        std::vector<std::vector<std::size_t>> nbs(n);
        for (auto [i, j] : edges) {
            nbs[i].push_back(j);
            nbs[j].push_back(i);
        }
        for (auto& v : nbs) {
            std::sort(v.begin(), v.end());
        }
        for (std::size_t hops : {1u, 2u, 3u}) {
            const std::size_t c = static_cast<std::size_t>(t) % n;
            auto g = khop_subgraph(nbs, c, hops);
            auto dist = bfs_distances(nbs, c);
            std::set<std::size_t> expect;
            for (std::size_t v = 0; v < n; ++v) {
                if (dist[v] <= hops) {
                    expect.insert(v);
                }
            }
            EXPECT_EQ(std::set<std::size_t>(g.nodes.begin(), g.nodes.end()), expect);
            for (std::size_t a = 0; a < g.nodes.size(); ++a) {
                EXPECT_EQ(g.hops[a], dist[g.nodes[a]]);
            }
            std::size_t induced = 0;
            for (auto [i, j] : edges) {
                induced += expect.count(i) && expect.count(j);
            }
            EXPECT_EQ(g.edges.size(), induced);
        }
    }
}

TEST(PositionalEncoding, CenterPattern) {
    auto p = positional_encoding(0, 0, 16);
    for (std::size_t k = 0; k < 16; ++k) {
        EXPECT_EQ(p[k], k % 2 ? 1.0 : 0.0);
    }
    EXPECT_EQ(positional_encoding(2.5, -1, 12), positional_encoding(2.5, -1, 12));
}

TEST(PositionalEncoding, UnitColumnOffsetWidthEight) {
    // Column offset 1: frequencies 10000^0 = 1 and 10000^(4/8) = 100 in the first half; zero row offset in the second.
    auto p = positional_encoding(0, 1, 8);
    std::vector<double> want{std::sin(1.0), std::cos(1.0), std::sin(0.01), std::cos(0.01), 0, 1, 0, 1};
    for (std::size_t k = 0; k < 8; ++k) {
        EXPECT_NEAR(p[k], want[k], 1e-15);
    }
    auto q = positional_encoding(1, 0, 8);
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_NEAR(q[4 + k], want[k], 1e-15);
    }
    EXPECT_THROW(positional_encoding(0, 0, 6), Error);
}

TEST(AssembleGraph, SumAndConcat) {
    auto spots = testing_support::hex_lattice(5, 5);
    auto slide = lattice_slide(spots, 16);
    auto adj = build_adjacency(spots, Geometry::hex_array);
    auto c = testing_support::index_of(spots, 2, 4);
    auto sub = khop_subgraph(adj, c, 1);

    auto sum = assemble_graph(slide.embeddings, spots, sub, Aggregation::sum);
    EXPECT_EQ(sum.features.rows(), 7u);
    EXPECT_EQ(sum.features.cols(), 16u);
    for (std::size_t k = 0; k < 16; ++k) {
        EXPECT_DOUBLE_EQ(sum.features(0, k), slide.embeddings.vectors(c, k) + (k % 2 ? 1.0 : 0.0));
    }

    auto cat = assemble_graph(slide.embeddings, spots, sub, Aggregation::concat);
    EXPECT_EQ(cat.features.cols(), 32u);
    for (std::size_t a = 0; a < sub.nodes.size(); ++a) {
        const auto& sp = spots[sub.nodes[a]];
        auto pe = positional_encoding(static_cast<double>(sp.array_row - spots[c].array_row), static_cast<double>(sp.array_col - spots[c].array_col), 16);
        for (std::size_t k = 0; k < 16; ++k) {
            EXPECT_EQ(cat.features(a, k), slide.embeddings.vectors(sub.nodes[a], k));
            EXPECT_EQ(cat.features(a, 16 + k), pe[k]);
        }
    }

    // Edges are exactly the adjacency edges among the chosen nodes.
    std::set<std::pair<std::size_t, std::size_t>> want;
    for (auto [i, j] : adj.edges) {
        auto pi = std::find(sub.nodes.begin(), sub.nodes.end(), i), pj = std::find(sub.nodes.begin(), sub.nodes.end(), j);
        if (pi != sub.nodes.end() && pj != sub.nodes.end()) {
            auto a = static_cast<std::size_t>(pi - sub.nodes.begin()), b = static_cast<std::size_t>(pj - sub.nodes.begin());
            want.insert({std::min(a, b), std::max(a, b)});
        }
    }
    std::set<std::pair<std::size_t, std::size_t>> got(cat.edges.begin(), cat.edges.end());
    EXPECT_EQ(got, want);
}

TEST(AssembleGraph, MissingEmbedding) {
    auto spots = testing_support::square_lattice(2, 2);
    auto slide = lattice_slide(spots, 4);
    slide.embeddings.spot_ids[1] = "other";
    auto adj = build_adjacency(spots, Geometry::square_grid);
    try {
        assemble_graph(slide.embeddings, spots, khop_subgraph(adj, 0, 1), Aggregation::sum);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::MissingEmbedding);
    }
}

TEST(BuildGraphs, OnePerSpotAndThreadIndependent) {
    auto spots = testing_support::hex_lattice(6, 6);
    auto slide = lattice_slide(spots, 8);
    auto adj = build_adjacency(spots, Geometry::hex_array);
    auto a = build_graphs(slide, adj, 2, Aggregation::concat, 1);
    auto b = build_graphs(slide, adj, 2, Aggregation::concat, 3);
    ASSERT_EQ(a.size(), spots.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].center_index, i);
        EXPECT_EQ(a[i].nodes, b[i].nodes);
        EXPECT_EQ(a[i].features, b[i].features);
    }
}
