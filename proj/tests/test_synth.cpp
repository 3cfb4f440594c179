#include "helpers.hpp"

#include "sepal/synth.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace sepal;

namespace {

SynthConfig small() {
    SynthConfig c;
    c.grid_rows = 6;
    c.grid_cols = 5;
    c.d_emb = 4;
    c.n_genes = 8;
    c.n_smooth = 3;
    return c;
}

}

TEST(Synth, GeneNamesAndShapes) {
    auto d = generate_synth(small());
    ASSERT_EQ(d.slides.size(), 3u);
    EXPECT_EQ(d.slides[0].id(), "train0");
    EXPECT_EQ(d.slides[1].id(), "val0");
    EXPECT_EQ(d.slides[2].id(), "test0");
    EXPECT_EQ(d.slides[1].split, Split::val);
    EXPECT_EQ(d.smooth_genes, (std::vector<std::string>{"smooth_000", "smooth_001", "smooth_002"}));
    const auto& e = d.slides[0].expression;
    EXPECT_EQ(e.gene_ids[3], "noise_000");
    EXPECT_EQ(e.values.rows(), 30u);
    EXPECT_EQ(e.stage, Stage::log1p);
    EXPECT_EQ(d.slides[0].embeddings.d_emb(), 4u);
    for (auto v : e.values.data()) EXPECT_GE(v, 0.0);
}

TEST(Synth, SameSeedSameFiles) {
    testing_support::TempDir a("synth_a"), b("synth_b");
    cmd_synth(small(), a.path().string());
    cmd_synth(small(), b.path().string());
    std::size_t files = 0;
    for (const auto& entry : std::filesystem::directory_iterator(a.path())) {
        const auto name = entry.path().filename().string();
        EXPECT_EQ(testing_support::slurp(entry.path().string()), testing_support::slurp(b.file(name))) << name;
        ++files;
    }
    // four files per slide plus the manifest
    EXPECT_EQ(files, 13u);
}

TEST(Synth, DifferentSeedDifferentValues) {
    auto c = small();
    auto x = generate_synth(c);
    c.seed = 2;
    auto y = generate_synth(c);
    EXPECT_NE(x.slides[0].expression.values, y.slides[0].expression.values);
}

TEST(Synth, NoSmoothGenes) {
    auto c = small();
    c.n_smooth = 0;
    auto d = generate_synth(c);
    EXPECT_TRUE(d.smooth_genes.empty());
    EXPECT_EQ(d.slides[0].expression.gene_ids.front(), "noise_000");
}

TEST(Synth, PlantedZerosAreExact) {
    auto c = small();
    c.grid_rows = 10;
    c.grid_cols = 10;
    c.zero_fraction = 0.1;
    auto d = generate_synth(c);
    for (const auto& s : d.slides) {
        for (std::size_t g = 0; g < c.n_genes; ++g) {
            std::size_t zeros = 0;
            for (std::size_t i = 0; i < 100; ++i) zeros += s.expression.values(i, g) == 0.0;
            EXPECT_EQ(zeros, 10u);
        }
    }
}

TEST(Synth, CountsInvertTheLogTransform) {
    auto d = generate_synth(small());
    const auto& logged = d.slides[0].expression;
    auto counts = to_counts(logged);
    EXPECT_EQ(counts.stage, Stage::raw_counts);
    for (std::size_t i = 0; i < logged.values.size(); ++i) {
        const double c = counts.values.data()[i];
        EXPECT_EQ(c, std::round(c));
        EXPECT_LE(std::abs(std::log2(c + 1) - logged.values.data()[i]), 0.5 / std::log(2.0) / (c + 0.5) + 1e-12);
    }
}

TEST(Synth, HexLayoutHasSixInteriorNeighbours) {
    auto c = small();
    c.geometry = Geometry::hex_array;
    auto d = generate_synth(c);
    auto adj = build_adjacency(d.slides[0].spots, Geometry::hex_array);
    auto deg = adj.degrees();
    std::size_t six = 0;
    for (auto k : deg) six += k == 6;
    // interior rows 1..4, columns 1..3
    EXPECT_EQ(six, 12u);
}

TEST(Synth, ManifestIsReadable) {
    testing_support::TempDir dir("synth_manifest");
    auto path = cmd_synth(small(), dir.path().string());
    auto m = read_manifest(path);
    EXPECT_EQ(m.slides.size(), 3u);
    EXPECT_EQ(m.n_genes_select, 3u);
    EXPECT_EQ(m.geometry, Geometry::square_grid);
    auto e = read_expression((dir.path() / m.slides[0].expr_path).string());
    EXPECT_EQ(e.stage, Stage::raw_counts);
}

TEST(Synth, RejectsAutoRadius) {
    auto c = small();
    c.geometry = Geometry::auto_radius;
    try {
        generate_synth(c);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::InvalidConfig);
    }
}
