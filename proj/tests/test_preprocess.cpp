#include <gtest/gtest.h>

#include "helpers.hpp"
#include "sepal/preprocess.hpp"

#include <cmath>
#include <limits>

using namespace sepal;
using testing_support::expression;

namespace {

constexpr double inf = std::numeric_limits<double>::infinity();

FilterThresholds open_thresholds() {
    return FilterThresholds{0, inf, 0, inf, 0, 0};
}

ExpressionMatrix with_stage(ExpressionMatrix m, Stage s) {
    m.stage = s;
    return m;
}

}

TEST(FilterByCounts, OpenRangeIsIdentity) {
    auto m = expression("s", {"a", "b"}, 3, {1, 2, 3, 4, 0, 9});
    auto r = filter_by_counts(m, open_thresholds());
    ASSERT_EQ(r.matrices.size(), 1u);
    EXPECT_EQ(r.matrices[0].values, m.values);
    EXPECT_EQ(r.matrices[0].gene_ids, m.gene_ids);
    EXPECT_EQ(r.matrices[0].stage, Stage::filtered);
    EXPECT_TRUE(r.removed.empty());
}

TEST(FilterByCounts, EmptySpotDropped) {
    auto m = expression("s", {"a", "b"}, 3, {1, 2, 0, 0, 4, 5});
    auto thr = open_thresholds();
    thr.min_spot_counts = 1;
    auto r = filter_by_counts(m, thr);
    EXPECT_EQ(r.matrices[0].spot_ids, (std::vector<std::string>{"s_spot0", "s_spot2"}));
    ASSERT_EQ(r.removed.size(), 1u);
    EXPECT_EQ(r.removed[0].id, "s_spot1");
}

TEST(FilterByCounts, GeneRangeAgainstColumnSums) {
    std::vector<double> vals{4, 20, 300, 6, 30, 600};
    auto m = expression("s", {"g10", "g50", "g900"}, 2, vals);
    // Oracle: column sums computed independently.
    std::vector<double> sums(3, 0);
    for (std::size_t k = 0; k < vals.size(); ++k) {
        sums[k % 3] += vals[k];
    }
    ASSERT_EQ(sums, (std::vector<double>{10, 50, 900}));
    auto thr = open_thresholds();
    thr.min_gene_counts = 20;
    thr.max_gene_counts = 100;
    auto r = filter_by_counts(m, thr);
    EXPECT_EQ(r.matrices[0].gene_ids, std::vector<std::string>{"g50"});
}

TEST(FilterByCounts, AllRemovedErrors) {
    auto m = expression("s", {"a"}, 2, {1, 1});
    auto thr = open_thresholds();
    thr.min_spot_counts = 5;
    try {
        filter_by_counts(m, thr);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::AllSpotsRemoved);
    }
    thr = open_thresholds();
    thr.min_gene_counts = 5;
    try {
        filter_by_counts(m, thr);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::AllGenesRemoved);
    }
}

TEST(FilterBySparsity, Examples) {
    // Gene "full" is nonzero everywhere; "thirty" in 3 of 10 spots.
    std::vector<double> vals;
    for (int i = 0; i < 10; ++i) {
        vals.push_back(1);
        vals.push_back(i < 3 ? 1 : 0);
    }
    auto m = expression("s", {"full", "thirty"}, 10, vals);
    EXPECT_EQ(filter_by_sparsity({m}, 100, 100), std::vector<std::string>{"full"});
    EXPECT_EQ(filter_by_sparsity({m}, 40, 0), std::vector<std::string>{"full"});
    EXPECT_EQ(filter_by_sparsity({m}, 30, 0), (std::vector<std::string>{"full", "thirty"}));
}

TEST(FilterBySparsity, PerSlideClause) {
    // "g": 8 of 10 nonzero in A, 1 of 10 in B (45% pooled).
    std::vector<double> a, b;
    for (int i = 0; i < 10; ++i) {
        a.insert(a.end(), {1.0, i < 8 ? 1.0 : 0.0});
        b.insert(b.end(), {1.0, i < 1 ? 1.0 : 0.0});
    }
    auto A = expression("A", {"base", "g"}, 10, a);
    auto B = expression("B", {"base", "g"}, 10, b);
    // Oracle: per-slide nonzero fractions.
    double frac_a = 0.8, frac_b = 0.1, pooled = 0.45;
    EXPECT_LT(frac_b * 100, 20);
    EXPECT_GE(frac_a * 100, 20);
    EXPECT_GE(pooled * 100, 40);
    EXPECT_EQ(filter_by_sparsity({A, B}, 40, 20), std::vector<std::string>{"base"});
    EXPECT_EQ(filter_by_sparsity({A, B}, 40, 10), (std::vector<std::string>{"base", "g"}));
}

TEST(Tpm, Examples) {
    auto m = with_stage(expression("s", {"a", "b", "c", "d"}, 1, {1, 2, 3, 4}), Stage::filtered);
    std::unordered_map<std::string, double> ones{{"a", 1}, {"b", 1}, {"c", 1}, {"d", 1}};
    const std::vector<const std::unordered_map<std::string, double>*> variants{nullptr, &ones};
    for (auto* lengths : variants) {
        auto t = tpm_normalize(m, lengths);
        EXPECT_EQ(t.stage, Stage::tpm);
        EXPECT_NEAR(t.values(0, 0), 1e5, 1e-9);
        EXPECT_NEAR(t.values(0, 1), 2e5, 1e-9);
        EXPECT_NEAR(t.values(0, 2), 3e5, 1e-9);
        EXPECT_NEAR(t.values(0, 3), 4e5, 1e-9);
    }

    auto single = with_stage(expression("s", {"x"}, 2, {7, 123}), Stage::filtered);
    auto ts = tpm_normalize(single);
    EXPECT_EQ(ts.values(0, 0), 1e6);
    EXPECT_EQ(ts.values(1, 0), 1e6);

    auto two = with_stage(expression("s", {"a", "b"}, 1, {10, 10}), Stage::filtered);
    std::unordered_map<std::string, double> lengths{{"a", 1}, {"b", 2}};
    auto t2 = tpm_normalize(two, &lengths);
    // Hand evaluation: rates 10 and 5, total 15.
    EXPECT_NEAR(t2.values(0, 0), 666666.67, 0.01);
    EXPECT_NEAR(t2.values(0, 1), 333333.33, 0.01);
}

TEST(Tpm, ZeroRowAndStage) {
    auto z = with_stage(expression("s", {"a", "b"}, 1, {0, 0}), Stage::filtered);
    try {
        tpm_normalize(z);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::ZeroRowSum);
    }
    auto raw = expression("s", {"a"}, 1, {1});
    try {
        tpm_normalize(raw);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::StageOrderViolation);
    }
}

TEST(Log1p, Examples) {
    auto m = with_stage(expression("s", {"a", "b", "c"}, 1, {0, 1, 1e6}), Stage::tpm);
    auto l = log1p_transform(m);
    EXPECT_EQ(l.stage, Stage::log1p);
    EXPECT_EQ(l.values(0, 0), 0);
    EXPECT_EQ(l.values(0, 1), 1);
    EXPECT_NEAR(l.values(0, 2), 19.9316, 1e-4);

    m.values(0, 0) = -1;
    try {
        log1p_transform(m);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::NegativeValue);
    }
}

TEST(Center, Examples) {
    auto one = with_stage(expression("A", {"g"}, 2, {1, 5}), Stage::log1p);
    EXPECT_EQ(center_per_slide({one}, true)[0].values, one.values);

    auto a = with_stage(expression("A", {"g"}, 2, {0.5, 1.5}), Stage::log1p);
    auto b = with_stage(expression("B", {"g"}, 2, {2.5, 3.5}), Stage::log1p);
    auto c = center_per_slide({a, b}, true);
    EXPECT_DOUBLE_EQ((c[0].values(0, 0) + c[0].values(1, 0)) / 2, 2.0);
    EXPECT_DOUBLE_EQ((c[1].values(0, 0) + c[1].values(1, 0)) / 2, 2.0);
    // Within-slide differences are preserved.
    EXPECT_DOUBLE_EQ(c[0].values(1, 0) - c[0].values(0, 0), 1.0);

    auto off = center_per_slide({a, b}, false);
    EXPECT_EQ(off[0].values, a.values);
    EXPECT_EQ(off[1].values, b.values);
}

TEST(TrainMean, Examples) {
    auto one = with_stage(expression("A", {"x", "y"}, 1, {3, 4}), Stage::denoised);
    auto val = with_stage(expression("V", {"x", "y"}, 1, {100, 100}), Stage::denoised);
    auto m = compute_train_mean({one, val}, {Split::train, Split::val});
    EXPECT_EQ(m.means, (std::vector<double>{3, 4}));

    auto two = with_stage(expression("A", {"g"}, 2, {0, 2}), Stage::denoised);
    EXPECT_EQ(compute_train_mean({two}, {Split::train}).means[0], 1);

    try {
        compute_train_mean({val}, {Split::val});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::EmptyTrainSplit);
    }
}

TEST(TrainMean, MatchesTwoPassOracle) {
    std::mt19937_64 rng(11);
    auto m = with_stage(expression("A", {"a", "b", "c"}, 100, std::vector<double>(300)), Stage::denoised);
    m.values = testing_support::random_matrix(100, 3, rng, 0, 20);
    auto mean = compute_train_mean({m}, {Split::train});
    for (std::size_t j = 0; j < 3; ++j) {
        // Two-pass oracle: rough mean, then corrected by the mean residual.
        long double rough = 0;
        for (std::size_t i = 0; i < 100; ++i) {
            rough += m.values(i, j);
        }
        rough /= 100;
        long double resid = 0;
        for (std::size_t i = 0; i < 100; ++i) {
            resid += m.values(i, j) - rough;
        }
        EXPECT_NEAR(mean.means[j], static_cast<double>(rough + resid / 100), 1e-12);
    }
}

TEST(Delta, ZeroAtMeanAndRoundTrip) {
    auto m = with_stage(expression("A", {"a", "b"}, 2, {1.5, 2.25, 1.5, 2.25}), Stage::denoised);
    TrainMeanVector mean{{"a", "b"}, {1.5, 2.25}};
    auto d = to_delta(m, mean);
    for (double v : d.data()) {
        EXPECT_EQ(v, 0.0);
    }

    // Dyadic values keep every subtraction and addition exact.
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> u(0, 4096);
    auto r = with_stage(expression("A", {"a", "b", "c"}, 20, std::vector<double>(60)), Stage::denoised);
    for (auto& v : r.values.data()) {
        v = u(rng) / 256.0;
    }
    TrainMeanVector rm{{"a", "b", "c"}, {3.125, 7.5, 0.0625}};
    EXPECT_EQ(from_delta(to_delta(r, rm), rm), r.values);

    // General doubles: the round trip is within one rounding of the larger operand.
    r.values = testing_support::random_matrix(20, 3, rng, 0, 10);
    rm.means = {1.0 / 3.0, 2.718281828, 9.87654321};
    auto back = from_delta(to_delta(r, rm), rm);
    for (std::size_t i = 0; i < 20; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            const double scale = std::max(std::abs(r.values(i, j)), std::abs(rm.means[j]));
            EXPECT_LE(std::abs(back(i, j) - r.values(i, j)), 2 * std::numeric_limits<double>::epsilon() * scale);
        }
    }
}

TEST(Delta, MissingGeneIsAlignmentMismatch) {
    auto m = with_stage(expression("A", {"a", "b"}, 1, {1, 2}), Stage::denoised);
    TrainMeanVector mean{{"a"}, {1}};
    try {
        to_delta(m, mean);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::GeneAlignmentMismatch);
    }
}

TEST(SubsetGenes, ReordersAndRejectsUnknown) {
    auto m = expression("A", {"a", "b", "c"}, 1, {1, 2, 3});
    auto s = subset_genes(m, {"c", "a"});
    EXPECT_EQ(s.values(0, 0), 3);
    EXPECT_EQ(s.values(0, 1), 1);
    EXPECT_THROW(subset_genes(m, {"zzz"}), Error);
}
