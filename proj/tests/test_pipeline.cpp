#include "helpers.hpp"

#include "sepal/pipeline.hpp"
#include "sepal/synth.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace sepal;
namespace fs = std::filesystem;

namespace {

SynthConfig tiny() {
    SynthConfig c;
    c.grid_rows = 6;
    c.grid_cols = 6;
    c.d_emb = 4;
    c.n_genes = 10;
    c.n_smooth = 4;
    return c;
}

PipelineConfig quick(const std::string& manifest, const std::string& work) {
    PipelineConfig p;
    p.manifest_path = manifest;
    p.workdir = work;
    p.hops = 1;
    p.pre_mlp = {};
    p.hidden = {8};
    p.stage1 = {1e-2, 16, 5, 0, 5};
    p.stage2 = {1e-3, 16, 2, 0, 2};
    return p;
}

template <class F>
ErrorKind kind_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error raised";
    return ErrorKind::InvalidConfig;
}

}

TEST(Pipeline, RunsEndToEndOnSyntheticData) {
    testing_support::TempDir dir("pipe_full");
    const auto manifest = cmd_synth(tiny(), (dir.path() / "data").string());
    const auto work = (dir.path() / "work").string();
    cmd_pipeline(quick(manifest, work));

    for (const char* f : {"preprocess/train0.expr.tsv", "preprocess/removed.tsv", "denoise/val0.mask.tsv", "denoise/imputation_report.tsv",
                          "select/moran_scores.tsv", "select/train_mean.tsv", "graphs/test0.graphs.tsv", "train/stage1.ckpt",
                          "train/stage2.ckpt", "train/stage2_history.tsv", "eval/metrics.tsv", "eval/per_gene.tsv", "eval/per_patch.tsv",
                          "eval/test0.pred.tsv", "figures/pcc_hist.csv"}) {
        EXPECT_TRUE(fs::exists(fs::path(work) / f)) << f;
    }
    auto summary = read_report((fs::path(work) / "eval" / "metrics.tsv").string());
    EXPECT_EQ(summary.n_values, 36u * 4u);
    EXPECT_GE(summary.mse, 0.0);
    auto pred = read_expression((fs::path(work) / "eval" / "test0.pred.tsv").string());
    EXPECT_EQ(pred.stage, Stage::predicted);
    EXPECT_EQ(pred.gene_ids.size(), 4u);
}

TEST(Pipeline, StageTwoStartsAtStageOneValidationError) {
    testing_support::TempDir dir("pipe_neutral");
    const auto manifest = cmd_synth(tiny(), (dir.path() / "data").string());
    auto cfg = quick(manifest, (dir.path() / "work").string());
    cmd_preprocess(cfg);
    cmd_denoise(cfg);
    cmd_select(cfg);
    cmd_train(cfg, 1);
    cmd_train(cfg, 2);
    auto ck1 = read_checkpoint((dir.path() / "work" / "train" / "stage1.ckpt").string());
    auto ck2 = read_checkpoint((dir.path() / "work" / "train" / "stage2.ckpt").string());
    EXPECT_EQ(detail::meta_value(ck1, "best_val_mse"), detail::meta_value(ck2, "initial_val_mse"));
}

TEST(Pipeline, SelectOnRawCountsIsAStageOrderViolation) {
    testing_support::TempDir dir("pipe_order");
    const auto manifest = cmd_synth(tiny(), (dir.path() / "data").string());
    auto cfg = quick(manifest, (dir.path() / "work").string());
    // put raw counts where the denoised matrices are expected
    auto m = read_manifest(manifest);
    fs::create_directories(dir.path() / "work" / "denoise");
    for (const auto& e : m.slides) {
        fs::copy_file(e.expr_path, dir.path() / "work" / "denoise" / (e.slide_id + ".expr.tsv"));
    }
    EXPECT_EQ(kind_of([&] { cmd_select(cfg); }), ErrorKind::StageOrderViolation);
}

TEST(Pipeline, MissingUpstreamOutputIsAStageOrderViolation) {
    testing_support::TempDir dir("pipe_missing");
    const auto manifest = cmd_synth(tiny(), (dir.path() / "data").string());
    auto cfg = quick(manifest, (dir.path() / "work").string());
    EXPECT_EQ(kind_of([&] { cmd_denoise(cfg); }), ErrorKind::StageOrderViolation);
    cmd_preprocess(cfg);
    cmd_denoise(cfg);
    cmd_select(cfg);
    EXPECT_EQ(kind_of([&] { cmd_train(cfg, 2); }), ErrorKind::StageOrderViolation);
    EXPECT_EQ(kind_of([&] { cmd_eval(cfg); }), ErrorKind::StageOrderViolation);
}

TEST(Pipeline, PreprocessRejectsLogScaleInput) {
    testing_support::TempDir dir("pipe_log");
    const auto data = (dir.path() / "data").string();
    const auto manifest = cmd_synth(tiny(), data);
    auto m = read_manifest(manifest);
    for (auto& e : m.slides) {
        e.expr_path = (fs::path(data) / (e.slide_id + ".log1p.tsv")).string();
    }
    write_manifest(manifest, m);
    auto cfg = quick(manifest, (dir.path() / "work").string());
    EXPECT_EQ(kind_of([&] { cmd_preprocess(cfg); }), ErrorKind::StageOrderViolation);
}

TEST(Pipeline, PresetsAndSpecResolution) {
    PipelineConfig cfg;
    apply_preset(cfg, "stnet-like");
    EXPECT_EQ(cfg.hops, 1u);
    EXPECT_EQ(cfg.op, nn::Operator::graphconv);
    EXPECT_EQ(cfg.aggregation, Aggregation::sum);
    auto spec = resolve_spec(cfg, 16, 32);
    EXPECT_EQ(spec.input_width, 16u);
    EXPECT_EQ(spec.post_mlp.back(), 32u);
    apply_preset(cfg, "visium-like");
    spec = resolve_spec(cfg, 16, 32);
    EXPECT_EQ(spec.input_width, 32u);
    EXPECT_EQ(spec.pre_mlp, std::vector<std::size_t>{512});
    EXPECT_EQ(cfg.stage2.learning_rate, 1e-5);
    EXPECT_EQ(kind_of([&] { apply_preset(cfg, "nope"); }), ErrorKind::InvalidConfig);
}

TEST(Pipeline, LockFilesRecordSettings) {
    testing_support::TempDir dir("pipe_lock");
    const auto manifest = cmd_synth(tiny(), (dir.path() / "data").string());
    auto cfg = quick(manifest, (dir.path() / "work").string());
    cmd_preprocess(cfg);
    auto body = testing_support::slurp((dir.path() / "work" / "preprocess" / "preprocess.lock").string());
    EXPECT_NE(body.find("hops = 1"), std::string::npos) << body;
}
