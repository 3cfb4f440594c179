#ifndef SEPAL_PIPELINE_HPP
#define SEPAL_PIPELINE_HPP

#include "core.hpp"
#include "denoise.hpp"
#include "eval.hpp"
#include "graphs.hpp"
#include "ingest.hpp"
#include "nn.hpp"
#include "preprocess.hpp"
#include "spatial.hpp"
#include "train.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace sepal {

/**
 * @brief Fully resolved settings of a pipeline run.
 *
 * Every command writes these settings, together with the manifest contents it used, to a `.lock` file in its output directory.
 */
struct PipelineConfig {
    std::string manifest_path;
    std::string workdir;
    int threads = 1;

    std::optional<Geometry> geometry;      // overrides the manifest
    std::optional<bool> center_slides;     // overrides the manifest

    std::size_t hops = 3;
    Aggregation aggregation = Aggregation::concat;
    nn::Operator op = nn::Operator::gcn;
    nn::Pooling pooling = nn::Pooling::sag_mean;
    double sag_ratio = 0.5;
    std::vector<std::size_t> pre_mlp{512};
    std::vector<std::size_t> hidden{256, 128};
    std::vector<std::size_t> post_mlp; // hidden widths; a final layer of width n_genes is always appended

    TrainConfig stage1{1e-4, 256, 100, 0, 10};
    TrainConfig stage2{1e-5, 256, 100, 0, 10};
    std::string preset = "visium-like";
};

/**
 * Apply a named preset. `visium-like` uses three hops, GCN layers and concatenated positional encodings;
 * `stnet-like` uses one hop, GraphConv layers and summed encodings.
 */
inline void apply_preset(PipelineConfig& cfg, const std::string& name) {
    if (name == "visium-like") {
        cfg.hops = 3;
        cfg.op = nn::Operator::gcn;
        cfg.aggregation = Aggregation::concat;
        cfg.pre_mlp = {512};
        cfg.hidden = {256, 128};
        cfg.post_mlp = {};
        cfg.stage2.learning_rate = 1e-5;
    } else if (name == "stnet-like") {
        cfg.hops = 1;
        cfg.op = nn::Operator::graphconv;
        cfg.aggregation = Aggregation::sum;
        cfg.pre_mlp = {};
        cfg.hidden = {256};
        cfg.post_mlp = {};
        cfg.stage2.learning_rate = 1e-4;
    } else {
        throw Error(ErrorKind::InvalidConfig, "unknown preset '" + name + "'");
    }
    cfg.stage1.batch_size = cfg.stage2.batch_size = 256;
    cfg.preset = name;
}

inline nn::ModelSpec resolve_spec(const PipelineConfig& cfg, std::size_t d_emb, std::size_t n_genes) {
    nn::ModelSpec spec;
    spec.input_width = cfg.aggregation == Aggregation::sum ? d_emb : 2 * d_emb;
    spec.pre_mlp = cfg.pre_mlp;
    spec.op = cfg.op;
    spec.gnn = cfg.hidden;
    spec.pooling = cfg.pooling;
    spec.sag_ratio = cfg.sag_ratio;
    spec.post_mlp = cfg.post_mlp;
    spec.post_mlp.push_back(n_genes);
    spec.n_genes = n_genes;
    spec.validate();
    return spec;
}

namespace detail {

namespace fs = std::filesystem;

inline std::string stage_dir(const PipelineConfig& cfg, const char* name) {
    const auto dir = fs::path(cfg.workdir) / name;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw Error(ErrorKind::IoFailure, "cannot create '" + dir.string() + "'");
    }
    return dir.string();
}

inline std::string in_dir(const std::string& dir, const std::string& file) {
    return (fs::path(dir) / file).string();
}

inline std::string upstream(const PipelineConfig& cfg, const char* stage, const std::string& file, const char* needed_by) {
    const auto path = (fs::path(cfg.workdir) / stage / file).string();
    if (!fs::exists(path)) {
        throw Error(ErrorKind::StageOrderViolation, std::string(needed_by) + " needs '" + path + "'; run the " + stage + " step first");
    }
    return path;
}

inline std::string fmt_train(const TrainConfig& t) {
    return "lr=" + format_real(t.learning_rate) + " batch=" + std::to_string(t.batch_size) + " epochs=" + std::to_string(t.max_epochs) +
        " max_steps=" + std::to_string(t.max_steps) + " patience=" + std::to_string(t.patience) + " seed=" + std::to_string(t.seed) +
        " beta1=" + format_real(t.beta1) + " beta2=" + format_real(t.beta2) + " epsilon=" + format_real(t.epsilon);
}

inline DatasetManifest load_manifest(const PipelineConfig& cfg) {
    auto m = read_manifest(cfg.manifest_path);
    if (cfg.geometry) {
        m.geometry = *cfg.geometry;
    }
    if (cfg.center_slides) {
        m.center_slides = *cfg.center_slides;
    }
    return m;
}

/** Resolved settings as `key = value` lines. */
inline std::string describe(const PipelineConfig& cfg, const DatasetManifest& m, const std::string& command) {
    std::string out = std::string("# sepal_format=") + format_version + "\n";
    auto line = [&](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
    line("command", command);
    line("manifest", cfg.manifest_path);
    line("workdir", cfg.workdir);
    line("threads", std::to_string(cfg.threads));
    line("preset", cfg.preset);
    line("geometry", to_string(m.geometry));
    line("center_slides", m.center_slides ? "true" : "false");
    line("n_genes_select", std::to_string(m.n_genes_select));
    line("eps_total", format_real(m.thresholds.eps_total));
    line("eps_wsi", format_real(m.thresholds.eps_wsi));
    line("count_min_spot", format_real(m.thresholds.min_spot_counts));
    line("count_max_spot", format_real(m.thresholds.max_spot_counts));
    line("count_min_gene", format_real(m.thresholds.min_gene_counts));
    line("count_max_gene", format_real(m.thresholds.max_gene_counts));
    line("gene_lengths", m.gene_lengths_path.empty() ? "-" : m.gene_lengths_path);
    line("hops", std::to_string(cfg.hops));
    line("aggregation", to_string(cfg.aggregation));
    line("operator", nn::to_string(cfg.op));
    line("pooling", nn::to_string(cfg.pooling));
    line("sag_ratio", format_real(cfg.sag_ratio));
    line("pre_mlp", nn::join_widths(cfg.pre_mlp));
    line("hidden", nn::join_widths(cfg.hidden));
    line("post_mlp", nn::join_widths(cfg.post_mlp));
    line("stage1", fmt_train(cfg.stage1));
    line("stage2", fmt_train(cfg.stage2));
    for (const auto& s : m.slides) {
        line("slide." + s.slide_id, std::string(to_string(s.split)) + " " + s.coords_path + " " + s.expr_path + " " + s.emb_path);
    }
    return out;
}

inline void write_lock(const PipelineConfig& cfg, const DatasetManifest& m, const std::string& dir, const std::string& command) {
    write_file(in_dir(dir, command + ".lock"), describe(cfg, m, command));
}

/** Coordinates and embeddings from the manifest, aligned with an expression matrix produced by an earlier step. */
inline Slide load_slide(const SlideEntry& e, ExpressionMatrix expression) {
    return align_slide(read_coordinates(e.coords_path), std::move(expression), read_embeddings(e.emb_path), e.split);
}

inline std::vector<Slide> load_stage(const PipelineConfig& cfg, const DatasetManifest& m, const char* stage, const char* needed_by) {
    std::vector<Slide> out;
    for (const auto& e : m.slides) {
        out.push_back(load_slide(e, read_expression(upstream(cfg, stage, e.slide_id + ".expr.tsv", needed_by))));
    }
    return out;
}

inline std::vector<ImputationMask> load_masks(const PipelineConfig& cfg, const DatasetManifest& m, const std::vector<Slide>& slides, const char* stage) {
    std::vector<ImputationMask> out;
    for (std::size_t s = 0; s < slides.size(); ++s) {
        auto mask = read_mask(upstream(cfg, stage, m.slides[s].slide_id + ".mask.tsv", stage));
        // Reorder rows to the slide's spot order.
        std::unordered_map<std::string, std::size_t> row;
        for (std::size_t i = 0; i < mask.spot_ids.size(); ++i) {
            row[mask.spot_ids[i]] = i;
        }
        ImputationMask aligned = ImputationMask::empty_like(slides[s].expression);
        for (std::size_t i = 0; i < slides[s].spots.size(); ++i) {
            auto it = row.find(slides[s].spots[i].spot_id);
            if (it == row.end()) {
                throw Error(ErrorKind::ShapeMismatch, "mask of slide '" + slides[s].id() + "' lacks spot '" + slides[s].spots[i].spot_id + "'");
            }
            for (std::size_t j = 0; j < aligned.gene_ids.size(); ++j) {
                aligned.values(i, j) = mask.values(it->second, j);
            }
        }
        if (mask.gene_ids != aligned.gene_ids) {
            throw Error(ErrorKind::GeneAlignmentMismatch, "mask genes of slide '" + slides[s].id() + "' differ from its expression");
        }
        out.push_back(std::move(aligned));
    }
    return out;
}

inline Matrix stack_rows(const std::vector<const Matrix*>& parts) {
    std::size_t rows = 0, cols = parts.empty() ? 0 : parts.front()->cols();
    for (auto* p : parts) {
        rows += p->rows();
    }
    Matrix out(rows, cols);
    std::size_t r = 0;
    for (auto* p : parts) {
        std::copy(p->data().begin(), p->data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * cols));
        r += p->rows();
    }
    return out;
}

inline BoolMatrix stack_masks(const std::vector<const BoolMatrix*>& parts) {
    std::size_t rows = 0, cols = parts.empty() ? 0 : parts.front()->cols();
    for (auto* p : parts) {
        rows += p->rows();
    }
    BoolMatrix out(rows, cols);
    std::size_t r = 0;
    for (auto* p : parts) {
        std::copy(p->data().begin(), p->data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * cols));
        r += p->rows();
    }
    return out;
}

inline std::vector<SpotGraph> slide_graphs(const Slide& slide, const DatasetManifest& m, std::size_t hops, Aggregation agg, int threads) {
    return build_graphs(slide, build_adjacency(slide.spots, m.geometry), hops, agg, threads);
}

inline std::string meta_value(const Checkpoint& ck, const std::string& key) {
    const auto* v = ck.find_meta(key);
    if (!v) {
        throw Error(ErrorKind::MalformedRow, "checkpoint is missing metadata '" + key + "'");
    }
    return *v;
}

}

/**
 * Count and sparsity filtering, TPM normalization and the log transform.
 * Writes `preprocess/<slide>.expr.tsv` and `preprocess/removed.tsv`.
 */
inline void cmd_preprocess(const PipelineConfig& cfg) {
    const auto m = detail::load_manifest(cfg);
    std::vector<Slide> slides;
    for (const auto& e : m.slides) {
        slides.push_back(detail::load_slide(e, read_expression(e.expr_path)));
    }
    validate_dataset(m, slides);

    std::vector<ExpressionMatrix> matrices;
    for (auto& s : slides) {
        require_stage(s.expression.stage, {Stage::raw_counts}, "preprocess");
        matrices.push_back(s.expression);
    }
    auto filtered = filter_by_counts(std::move(matrices), m.thresholds);
    const auto keep = filter_by_sparsity(filtered.matrices, m.thresholds.eps_total, m.thresholds.eps_wsi);
    if (keep.empty()) {
        throw Error(ErrorKind::AllGenesRemoved, "sparsity filtering removed every gene");
    }
    for (const auto& g : filtered.matrices.front().gene_ids) {
        if (std::find(keep.begin(), keep.end(), g) == keep.end()) {
            filtered.removed.push_back({"", g, "sparsity"});
        }
    }

    std::optional<std::unordered_map<std::string, double>> lengths;
    if (!m.gene_lengths_path.empty()) {
        lengths = read_gene_lengths(m.gene_lengths_path);
    }
    const auto dir = detail::stage_dir(cfg, "preprocess");
    for (const auto& fm : filtered.matrices) {
        auto out = log1p_transform(tpm_normalize(subset_genes(fm, keep), lengths ? &*lengths : nullptr));
        write_expression(detail::in_dir(dir, out.slide_id + ".expr.tsv"), out);
    }
    write_removals(detail::in_dir(dir, "removed.tsv"), filtered.removed);
    detail::write_lock(cfg, m, dir, "preprocess");
}

/**
 * Adaptive median imputation of dropout zeros. Writes `denoise/<slide>.expr.tsv`, `denoise/<slide>.mask.tsv`
 * and the imputation report.
 */
inline void cmd_denoise(const PipelineConfig& cfg) {
    const auto m = detail::load_manifest(cfg);
    auto slides = detail::load_stage(cfg, m, "preprocess", "denoise");
    std::vector<ExpressionMatrix> matrices;
    std::vector<std::vector<SpotRecord>> coords;
    for (auto& s : slides) {
        matrices.push_back(s.expression);
        coords.push_back(s.spots);
    }
    auto result = denoise_dataset(matrices, coords, cfg.threads);
    const auto dir = detail::stage_dir(cfg, "denoise");
    for (std::size_t s = 0; s < slides.size(); ++s) {
        write_expression(detail::in_dir(dir, slides[s].id() + ".expr.tsv"), result.matrices[s]);
        write_mask(detail::in_dir(dir, slides[s].id() + ".mask.tsv"), result.masks[s]);
    }
    write_imputation_report(detail::in_dir(dir, "imputation_report.tsv"), result.report);
    write_imputation_summary(detail::in_dir(dir, "imputation_summary.tsv"), result.report);
    detail::write_lock(cfg, m, dir, "denoise");
}

/**
 * Optional slide centering, Moran's I ranking and selection of the top genes, and the training mean.
 * Writes `select/<slide>.expr.tsv`, `select/<slide>.mask.tsv`, `select/moran_scores.tsv` and `select/train_mean.tsv`.
 */
inline void cmd_select(const PipelineConfig& cfg) {
    const auto m = detail::load_manifest(cfg);
    auto slides = detail::load_stage(cfg, m, "denoise", "select");
    std::vector<ExpressionMatrix> matrices;
    std::vector<Adjacency> adjs;
    std::vector<Split> splits;
    std::vector<std::string> ids;
    for (auto& s : slides) {
        require_stage(s.expression.stage, {Stage::denoised}, "gene selection");
        matrices.push_back(s.expression);
        adjs.push_back(build_adjacency(s.spots, m.geometry));
        splits.push_back(s.split);
        ids.push_back(s.id());
    }
    const auto masks = detail::load_masks(cfg, m, slides, "denoise");
    matrices = center_per_slide(std::move(matrices), m.center_slides);
    const auto selection = select_genes(matrices, adjs, m.n_genes_select, cfg.threads);

    std::vector<ExpressionMatrix> selected;
    const auto dir = detail::stage_dir(cfg, "select");
    for (std::size_t s = 0; s < matrices.size(); ++s) {
        selected.push_back(subset_genes(matrices[s], selection.selected));
        write_expression(detail::in_dir(dir, ids[s] + ".expr.tsv"), selected.back());
        write_mask(detail::in_dir(dir, ids[s] + ".mask.tsv"), subset_genes(masks[s], selection.selected));
    }
    write_moran_scores(detail::in_dir(dir, "moran_scores.tsv"), selection, ids);
    write_train_mean(detail::in_dir(dir, "train_mean.tsv"), compute_train_mean(selected, splits));
    detail::write_lock(cfg, m, dir, "select");
}

/**
 * Subgraph construction for every spot. Writes `graphs/<slide>.graphs.tsv`.
 */
inline void cmd_graphs(const PipelineConfig& cfg) {
    const auto m = detail::load_manifest(cfg);
    auto slides = detail::load_stage(cfg, m, "select", "graphs");
    const auto dir = detail::stage_dir(cfg, "graphs");
    for (const auto& s : slides) {
        write_graph_dump(detail::in_dir(dir, s.id() + ".graphs.tsv"), detail::slide_graphs(s, m, cfg.hops, cfg.aggregation, cfg.threads), s.spots);
    }
    detail::write_lock(cfg, m, dir, "graphs");
}

struct SplitData {
    Matrix embeddings;
    Matrix delta;
    std::vector<SpotGraph> graphs;
};

namespace detail {

inline SplitData gather_split(const std::vector<Slide>& slides, const DatasetManifest& m, const TrainMeanVector& mean, Split split,
                              const PipelineConfig* graphs_cfg) {
    std::vector<Matrix> deltas;
    std::vector<const Matrix*> emb_parts, delta_parts;
    SplitData out;
    for (const auto& s : slides) {
        if (s.split == split) {
            deltas.push_back(to_delta(s.expression, mean));
        }
    }
    std::size_t k = 0;
    for (const auto& s : slides) {
        if (s.split != split) {
            continue;
        }
        emb_parts.push_back(&s.embeddings.vectors);
        delta_parts.push_back(&deltas[k++]);
        if (graphs_cfg) {
            auto g = slide_graphs(s, m, graphs_cfg->hops, graphs_cfg->aggregation, graphs_cfg->threads);
            out.graphs.insert(out.graphs.end(), std::make_move_iterator(g.begin()), std::make_move_iterator(g.end()));
        }
    }
    if (emb_parts.empty()) {
        throw Error(ErrorKind::EmptySplit, std::string("no slides in the ") + to_string(split) + " split");
    }
    out.embeddings = stack_rows(emb_parts);
    out.delta = stack_rows(delta_parts);
    return out;
}

}

/**
 * Stage 1 fits the linear head; stage 2 fits the spatial correction with the head frozen.
 * Writes `train/stage<k>.ckpt` and `train/stage<k>_history.tsv`.
 */
inline void cmd_train(const PipelineConfig& cfg, int stage) {
    if (stage != 1 && stage != 2) {
        throw Error(ErrorKind::InvalidConfig, "training stage must be 1 or 2");
    }
    const auto m = detail::load_manifest(cfg);
    const auto mean = read_train_mean(detail::upstream(cfg, "select", "train_mean.tsv", "train"));
    auto slides = detail::load_stage(cfg, m, "select", "train");
    const auto dir = detail::stage_dir(cfg, "train");

    if (stage == 1) {
        auto tr = detail::gather_split(slides, m, mean, Split::train, nullptr);
        auto va = detail::gather_split(slides, m, mean, Split::val, nullptr);
        TrainConfig tc = cfg.stage1;
        tc.threads = cfg.threads;
        auto result = stage1_train({tr.embeddings, tr.delta, va.embeddings, va.delta}, tc);
        write_checkpoint(detail::in_dir(dir, "stage1.ckpt"), nn::to_checkpoint(result.head, nullptr, {
            {"stage", "1"}, {"best_epoch", std::to_string(result.best_epoch)}, {"best_val_mse", format_real(result.best_val_mse)}}));
        write_history(detail::in_dir(dir, "stage1_history.tsv"), result.history);
        detail::write_lock(cfg, m, dir, "train_stage1");
        return;
    }

    const auto ck1_path = (std::filesystem::path(cfg.workdir) / "train" / "stage1.ckpt").string();
    if (!std::filesystem::exists(ck1_path)) {
        throw Error(ErrorKind::StageOrderViolation, "stage 2 needs the stage 1 checkpoint '" + ck1_path + "'");
    }
    const auto head = nn::from_checkpoint(read_checkpoint(ck1_path)).head;
    auto tr = detail::gather_split(slides, m, mean, Split::train, &cfg);
    auto va = detail::gather_split(slides, m, mean, Split::val, &cfg);
    const auto spec = resolve_spec(cfg, tr.embeddings.cols(), mean.means.size());
    TrainConfig tc = cfg.stage2;
    tc.threads = cfg.threads;
    auto result = stage2_train({std::move(tr.graphs), head.predict(tr.embeddings), tr.delta, std::move(va.graphs), head.predict(va.embeddings), va.delta}, spec, tc);
    write_checkpoint(detail::in_dir(dir, "stage2.ckpt"), nn::to_checkpoint(head, &result.state, {
        {"stage", "2"}, {"best_epoch", std::to_string(result.best_epoch)}, {"best_val_mse", format_real(result.best_val_mse)},
        {"initial_val_mse", format_real(result.initial_val_mse)}, {"graph.hops", std::to_string(cfg.hops)},
        {"graph.aggregation", to_string(cfg.aggregation)}}));
    write_history(detail::in_dir(dir, "stage2_history.tsv"), result.history);
    detail::write_lock(cfg, m, dir, "train_stage2");
}

namespace detail {

struct Evaluated {
    std::vector<SlideOutcome> slides;
    MetricsReport pooled;
};

inline Evaluated evaluate_test(const std::vector<Slide>& slides,
                               const std::vector<ImputationMask>& masks, const std::vector<ExpressionMatrix>& predictions) {
    Evaluated ev;
    std::vector<const Matrix*> preds, truths;
    std::vector<const BoolMatrix*> mask_parts;
    std::vector<std::string> patch_ids;
    for (std::size_t s = 0; s < slides.size(); ++s) {
        if (slides[s].split != Split::test) {
            continue;
        }
        ev.slides.push_back({slides[s].spots, predictions[s], slides[s].expression, masks[s]});
    }
    if (ev.slides.empty()) {
        throw Error(ErrorKind::EmptySplit, "no slides in the test split");
    }
    for (const auto& o : ev.slides) {
        if (o.prediction.gene_ids != o.truth.gene_ids) {
            throw Error(ErrorKind::GeneAlignmentMismatch, "prediction genes differ from the ground truth of slide '" + o.truth.slide_id + "'");
        }
        preds.push_back(&o.prediction.values);
        truths.push_back(&o.truth.values);
        mask_parts.push_back(&o.mask.values);
        for (const auto& id : o.truth.spot_ids) {
            patch_ids.push_back(o.truth.slide_id + ":" + id);
        }
    }
    ev.pooled = evaluate(stack_rows(preds), stack_rows(truths), stack_masks(mask_parts), ev.slides.front().truth.gene_ids, std::move(patch_ids));
    return ev;
}

}

/**
 * Predict the test slides with the newest checkpoint and score them against the selected, denoised expression.
 * Imputed cells are excluded. Writes `eval/metrics.tsv`, `eval/per_gene.tsv`, `eval/per_patch.tsv`,
 * `eval/metrics_<slide>.tsv` and `eval/<slide>.pred.tsv`.
 */
inline void cmd_eval(const PipelineConfig& cfg) {
    const auto m = detail::load_manifest(cfg);
    const auto mean = read_train_mean(detail::upstream(cfg, "select", "train_mean.tsv", "eval"));
    auto slides = detail::load_stage(cfg, m, "select", "eval");
    const auto masks = detail::load_masks(cfg, m, slides, "select");

    const auto train_dir = std::filesystem::path(cfg.workdir) / "train";
    std::string ck_path = (train_dir / "stage2.ckpt").string();
    if (!std::filesystem::exists(ck_path)) {
        ck_path = detail::upstream(cfg, "train", "stage1.ckpt", "eval");
    }
    const auto ck = read_checkpoint(ck_path);
    const auto restored = nn::from_checkpoint(ck);
    std::size_t hops = cfg.hops;
    Aggregation agg = cfg.aggregation;
    if (restored.spatial) {
        hops = static_cast<std::size_t>(::sepal::detail::parse_integer(detail::meta_value(ck, "graph.hops"), ck_path, 0));
        auto a = parse_aggregation(detail::meta_value(ck, "graph.aggregation"));
        if (!a) {
            throw Error(ErrorKind::MalformedRow, "checkpoint has an unknown aggregation");
        }
        agg = *a;
    }

    const auto dir = detail::stage_dir(cfg, "eval");
    std::vector<ExpressionMatrix> predictions;
    for (const auto& s : slides) {
        if (s.split != Split::test) {
            predictions.emplace_back();
            continue;
        }
        std::vector<SpotGraph> graphs;
        if (restored.spatial) {
            graphs = detail::slide_graphs(s, m, hops, agg, cfg.threads);
        }
        predictions.push_back(predict(restored.head, restored.spatial ? &*restored.spatial : nullptr, s, graphs, mean, cfg.threads));
        write_expression(detail::in_dir(dir, s.id() + ".pred.tsv"), predictions.back());
    }

    auto ev = detail::evaluate_test(slides, masks, predictions);
    write_report(detail::in_dir(dir, "metrics.tsv"), ev.pooled);
    write_per_gene(detail::in_dir(dir, "per_gene.tsv"), ev.pooled);
    write_per_patch(detail::in_dir(dir, "per_patch.tsv"), ev.pooled);
    for (const auto& o : ev.slides) {
        std::vector<std::string> patch_ids;
        for (const auto& id : o.truth.spot_ids) {
            patch_ids.push_back(o.truth.slide_id + ":" + id);
        }
        write_report(detail::in_dir(dir, "metrics_" + o.truth.slide_id + ".tsv"),
                     evaluate(o.prediction.values, o.truth.values, o.mask.values, o.truth.gene_ids, std::move(patch_ids)));
    }
    detail::write_lock(cfg, m, dir, "eval");
}

/**
 * PCC histogram and heatmaps from the evaluation outputs. Writes into `figures/`.
 */
inline std::vector<std::string> cmd_figures(const PipelineConfig& cfg) {
    const auto m = detail::load_manifest(cfg);
    auto slides = detail::load_stage(cfg, m, "select", "figures");
    const auto masks = detail::load_masks(cfg, m, slides, "select");
    std::vector<ExpressionMatrix> predictions;
    for (const auto& s : slides) {
        if (s.split != Split::test) {
            predictions.emplace_back();
            continue;
        }
        auto pred = read_expression(detail::upstream(cfg, "eval", s.id() + ".pred.tsv", "figures"));
        require_stage(pred.stage, {Stage::predicted}, "figures");
        if (pred.spot_ids != s.expression.spot_ids) {
            throw Error(ErrorKind::ShapeMismatch, "predictions of slide '" + s.id() + "' are not in spot order");
        }
        predictions.push_back(std::move(pred));
    }
    auto ev = detail::evaluate_test(slides, masks, predictions);
    const auto dir = detail::stage_dir(cfg, "figures");
    auto written = emit_figures(ev.pooled, ev.slides, dir);
    detail::write_lock(cfg, m, dir, "figures");
    return written;
}

/** Every step in order, training both stages. */
inline void cmd_pipeline(const PipelineConfig& cfg) {
    cmd_preprocess(cfg);
    cmd_denoise(cfg);
    cmd_select(cfg);
    cmd_graphs(cfg);
    cmd_train(cfg, 1);
    cmd_train(cfg, 2);
    cmd_eval(cfg);
    cmd_figures(cfg);
}

}

#endif
