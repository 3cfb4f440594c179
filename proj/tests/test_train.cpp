#include "helpers.hpp"

#include "sepal/train.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace sepal;
using testing_support::random_edges;
using testing_support::random_matrix;

namespace {

Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix out(x.rows(), w.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t o = 0; o < w.rows(); ++o) {
            double s = b(0, o);
            for (std::size_t k = 0; k < x.cols(); ++k) s += x(i, k) * w(o, k);
            out(i, o) = s;
        }
    return out;
}

Stage1Data linear_problem(std::size_t n, std::size_t d, std::size_t g, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto w = random_matrix(g, d, rng);
    auto b = random_matrix(1, g, rng);
    Stage1Data data;
    data.train_x = random_matrix(n, d, rng);
    data.val_x = random_matrix(n / 2, d, rng);
    data.train_y = affine(data.train_x, w, b);
    data.val_y = affine(data.val_x, w, b);
    return data;
}

std::vector<SpotGraph> random_graphs(std::size_t count, std::size_t width, std::mt19937_64& rng) {
    std::vector<SpotGraph> out;
    for (std::size_t i = 0; i < count; ++i) {
        SpotGraph g;
        const std::size_t n = 2 + i % 5;
        for (std::size_t k = 0; k < n; ++k) g.nodes.push_back(k);
        g.edges = random_edges(n, 0.6, rng);
        g.features = random_matrix(n, width, rng);
        out.push_back(std::move(g));
    }
    return out;
}

nn::ModelSpec small_spec(std::size_t width, std::size_t genes) {
    nn::ModelSpec s;
    s.input_width = width;
    s.op = nn::Operator::graphconv;
    s.gnn = {6};
    s.post_mlp = {genes};
    s.n_genes = genes;
    return s;
}

Stage2Data graph_problem(std::size_t n_train, std::size_t width, std::size_t genes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Stage2Data d;
    d.train_graphs = random_graphs(n_train, width, rng);
    d.val_graphs = random_graphs(n_train / 2, width, rng);
    d.train_local = random_matrix(n_train, genes, rng);
    d.val_local = random_matrix(n_train / 2, genes, rng);
    // local prediction plus a learnable term of the center features
    auto target = [&](const std::vector<SpotGraph>& gs, const Matrix& local) {
        Matrix y = local;
        for (std::size_t i = 0; i < gs.size(); ++i)
            for (std::size_t j = 0; j < genes; ++j) y(i, j) += 0.5 * gs[i].features(0, j % width);
        return y;
    };
    d.train_y = target(d.train_graphs, d.train_local);
    d.val_y = target(d.val_graphs, d.val_local);
    return d;
}

}

TEST(Stage1, FitsLinearTargets) {
    auto data = linear_problem(256, 5, 3, 1);
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 32;
    cfg.max_epochs = 1000;
    cfg.max_steps = 2000;
    cfg.patience = 1000;
    auto r = stage1_train(data, cfg);
    EXPECT_LE(r.best_val_mse, 1e-4);
    EXPECT_LE(r.step_losses.size(), 2000u);
    EXPECT_EQ(r.history.front().epoch, 0u);
}

TEST(Stage1, ZeroLearningRateLeavesHeadAtInit) {
    auto data = linear_problem(40, 3, 2, 2);
    TrainConfig cfg;
    cfg.learning_rate = 0;
    cfg.batch_size = 8;
    cfg.max_epochs = 3;
    cfg.seed = 7;
    auto r = stage1_train(data, cfg);
    EXPECT_EQ(r.head, nn::init_head(3, 2, 7));
    EXPECT_EQ(r.best_epoch, 0u);
}

TEST(Stage1, NoGenesIsAnEmptySplit) {
    auto data = linear_problem(10, 3, 2, 3);
    data.train_y = Matrix(10, 0);
    data.val_y = Matrix(5, 0);
    try {
        stage1_train(data, TrainConfig{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::EmptySplit);
    }
}

TEST(Stage1, RejectsBadConfig) {
    auto data = linear_problem(10, 3, 2, 3);
    TrainConfig cfg;
    cfg.batch_size = 0;
    try {
        stage1_train(data, cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::InvalidConfig);
    }
}

TEST(Stage1, DivergenceIsReported) {
    auto data = linear_problem(20, 3, 2, 4);
    TrainConfig cfg;
    cfg.learning_rate = 1e300;
    cfg.batch_size = 4;
    try {
        stage1_train(data, cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::DivergedLoss);
    }
}

TEST(Stage1, SameSeedSameResult) {
    auto data = linear_problem(64, 4, 3, 5);
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 16;
    cfg.max_epochs = 5;
    auto a = stage1_train(data, cfg);
    auto b = stage1_train(data, cfg);
    EXPECT_EQ(a.head, b.head);
    EXPECT_EQ(a.step_losses, b.step_losses);
}

TEST(Stage2, StartsExactlyAtTheLocalPrediction) {
    auto s1 = linear_problem(64, 4, 3, 6);
    TrainConfig c1;
    c1.learning_rate = 1e-2;
    c1.batch_size = 16;
    c1.max_epochs = 3;
    auto head = stage1_train(s1, c1);

    std::mt19937_64 rng(6);
    Stage2Data d;
    d.train_graphs = random_graphs(s1.train_x.rows(), 4, rng);
    d.val_graphs = random_graphs(s1.val_x.rows(), 4, rng);
    for (std::size_t i = 0; i < d.train_graphs.size(); ++i)
        for (std::size_t k = 0; k < 4; ++k) d.train_graphs[i].features(0, k) = s1.train_x(i, k);
    for (std::size_t i = 0; i < d.val_graphs.size(); ++i)
        for (std::size_t k = 0; k < 4; ++k) d.val_graphs[i].features(0, k) = s1.val_x(i, k);
    d.train_local = head.head.predict(s1.train_x);
    d.val_local = head.head.predict(s1.val_x);
    d.train_y = s1.train_y;
    d.val_y = s1.val_y;

    for (auto pooling : {nn::Pooling::sag_mean, nn::Pooling::global_mean}) {
        for (bool post : {false, true}) {
            auto spec = small_spec(4, 3);
            spec.pooling = pooling;
            if (!post) {
                spec.post_mlp.clear();
                spec.gnn = {3};
            }
            TrainConfig c2;
            c2.max_epochs = 1;
            auto r = stage2_train(d, spec, c2);
            EXPECT_EQ(r.initial_val_mse, head.best_val_mse);
        }
    }
}

TEST(Stage2, ZeroLearningRateLeavesModelAtInit) {
    auto d = graph_problem(12, 3, 2, 1);
    TrainConfig cfg;
    cfg.learning_rate = 0;
    cfg.batch_size = 4;
    cfg.max_epochs = 2;
    cfg.seed = 3;
    auto spec = small_spec(3, 2);
    auto r = stage2_train(d, spec, cfg);
    EXPECT_EQ(r.state, nn::init_model(spec, 3));
}

TEST(Stage2, ReducesTrainingLoss) {
    auto d = graph_problem(32, 3, 2, 2);
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 8;
    cfg.max_epochs = 60;
    cfg.patience = 60;
    auto r = stage2_train(d, small_spec(3, 2), cfg);
    EXPECT_LT(r.best_val_mse, r.initial_val_mse);
    EXPECT_LT(r.history.back().train_mse, r.history.front().train_mse);
}

TEST(Stage2, DeterministicWithOneThread) {
    auto d = graph_problem(16, 3, 2, 3);
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 4;
    cfg.max_epochs = 3;
    auto a = stage2_train(d, small_spec(3, 2), cfg);
    auto b = stage2_train(d, small_spec(3, 2), cfg);
    EXPECT_EQ(a.state, b.state);
    EXPECT_EQ(a.step_losses, b.step_losses);
}

TEST(Stage2, ThreadedGradientsMatchSerial) {
    auto d = graph_problem(16, 3, 2, 4);
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 8;
    cfg.max_epochs = 2;
    auto serial = stage2_train(d, small_spec(3, 2), cfg);
    cfg.threads = 3;
    auto threaded = stage2_train(d, small_spec(3, 2), cfg);
    for (std::size_t p = 0; p < serial.state.params.size(); ++p) {
        const auto& a = serial.state.params[p].value.data();
        const auto& b = threaded.state.params[p].value.data();
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
    }
}

TEST(Stage2, NoValidationGraphsIsAnEmptySplit) {
    auto d = graph_problem(8, 3, 2, 5);
    d.val_graphs.clear();
    try {
        stage2_train(d, small_spec(3, 2), TrainConfig{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::EmptySplit);
    }
}

TEST(SpatialModule, NodeRelabellingDoesNotChangeTheOutput) {
    std::mt19937_64 rng(12);
    for (auto pooling : {nn::Pooling::sag_mean, nn::Pooling::global_mean}) {
        for (auto op : {nn::Operator::gcn, nn::Operator::graphconv}) {
            auto spec = small_spec(3, 2);
            spec.op = op;
            spec.pooling = pooling;
            auto state = nn::init_model(spec, 1);
            for (auto& p : state.params) p.value = random_matrix(p.value.rows(), p.value.cols(), rng);
            auto g = random_graphs(5, 3, rng).back();
            std::vector<std::size_t> perm(g.n_nodes());
            std::iota(perm.begin(), perm.end(), 0);
            std::shuffle(perm.begin(), perm.end(), rng);
            SpotGraph h = g;
            for (std::size_t i = 0; i < perm.size(); ++i)
                for (std::size_t k = 0; k < 3; ++k) h.features(perm[i], k) = g.features(i, k);
            for (auto& [a, b] : h.edges) {
                a = perm[a];
                b = perm[b];
                if (a > b) std::swap(a, b);
            }
            auto x = nn::spatial_forward(state, g);
            auto y = nn::spatial_forward(state, h);
            for (std::size_t j = 0; j < x.size(); ++j) EXPECT_NEAR(x[j], y[j], 1e-12);
        }
    }
}

TEST(Predict, ZeroModelsGiveTheTrainingMean) {
    Slide slide;
    slide.expression = testing_support::expression("s", {"a", "b"}, 3, {0, 0, 0, 0, 0, 0}, Stage::denoised);
    slide.embeddings.slide_id = "s";
    slide.embeddings.spot_ids = slide.expression.spot_ids;
    std::mt19937_64 rng(1);
    slide.embeddings.vectors = random_matrix(3, 4, rng);
    TrainMeanVector mean{{"a", "b"}, {1.25, -0.5}};
    nn::LinearHead head{Matrix(2, 4), Matrix(1, 2)};

    auto spec = small_spec(4, 2);
    auto state = nn::init_model(spec, 0);
    std::vector<SpotGraph> graphs;
    for (std::size_t i = 0; i < 3; ++i) {
        SpotGraph g;
        g.nodes = {i};
        g.features = Matrix(1, 4);
        for (std::size_t k = 0; k < 4; ++k) g.features(0, k) = slide.embeddings.vectors(i, k);
        graphs.push_back(g);
    }
    for (const nn::ModelState* s : std::vector<const nn::ModelState*>{nullptr, &state}) {
        auto out = predict(head, s, slide, graphs, mean);
        EXPECT_EQ(out.stage, Stage::predicted);
        for (std::size_t i = 0; i < 3; ++i) {
            EXPECT_EQ(out.values(i, 0), 1.25);
            EXPECT_EQ(out.values(i, 1), -0.5);
        }
    }
}

TEST(Predict, RejectsMeanOfOtherWidth) {
    Slide slide;
    slide.expression = testing_support::expression("s", {"a"}, 1, {0}, Stage::denoised);
    slide.embeddings.vectors = Matrix(1, 2);
    nn::LinearHead head{Matrix(1, 2), Matrix(1, 1)};
    try {
        predict(head, nullptr, slide, {}, TrainMeanVector{{"a", "b"}, {0, 0}});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::GeneAlignmentMismatch);
    }
}
