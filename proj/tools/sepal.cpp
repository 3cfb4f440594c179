#include "CLI11.hpp"

#include "sepal/pipeline.hpp"
#include "sepal/synth.hpp"

#include <cstdlib>
#include <iostream>

namespace {

std::vector<std::size_t> widths(const std::string& text) {
    return sepal::nn::parse_widths(text);
}

struct Overrides {
    std::string preset;
    std::optional<std::size_t> hops;
    std::string op, aggregation, pooling, geometry, center;
    std::optional<double> sag_ratio, lr, lr1;
    std::optional<std::string> pre_mlp, hidden, post_mlp;
    std::optional<std::size_t> batch, epochs, patience, max_steps;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, sepal::PipelineConfig& cfg, Overrides& o) {
    cmd->add_option("--manifest", cfg.manifest_path, "Dataset manifest")->required();
    cmd->add_option("--workdir", cfg.workdir, "Output directory")->required();
    cmd->add_option("--threads", cfg.threads, "Worker threads (falls back to SEPAL_THREADS)");
    cmd->add_option("--preset", o.preset, "visium-like or stnet-like");
    cmd->add_option("--hops", o.hops, "Subgraph radius in hops");
    cmd->add_option("--operator", o.op, "gcn or graphconv");
    cmd->add_option("--aggregation", o.aggregation, "sum or concat");
    cmd->add_option("--pooling", o.pooling, "sag_mean or global_mean");
    cmd->add_option("--sag-ratio", o.sag_ratio, "Fraction of nodes kept by SAG pooling");
    cmd->add_option("--pre-mlp", o.pre_mlp, "Comma-separated widths, '-' for none");
    cmd->add_option("--hidden", o.hidden, "Comma-separated graph layer widths");
    cmd->add_option("--post-mlp", o.post_mlp, "Comma-separated hidden widths before the output layer, '-' for none");
    cmd->add_option("--lr", o.lr, "Learning rate of stage 2");
    cmd->add_option("--lr-stage1", o.lr1, "Learning rate of stage 1");
    cmd->add_option("--batch", o.batch, "Batch size");
    cmd->add_option("--epochs", o.epochs, "Maximum epochs");
    cmd->add_option("--patience", o.patience, "Early stopping patience");
    cmd->add_option("--max-steps", o.max_steps, "Optimizer step limit, 0 for none");
    cmd->add_option("--seed", o.seed, "Random seed");
    cmd->add_option("--center-slides", o.center, "true or false");
    cmd->add_option("--geometry", o.geometry, "hex_array, square_grid or auto_radius");
}

void resolve(sepal::PipelineConfig& cfg, const Overrides& o, bool threads_given) {
    using sepal::Error;
    using sepal::ErrorKind;
    if (!threads_given) {
        if (const char* env = std::getenv("SEPAL_THREADS")) {
            cfg.threads = static_cast<int>(sepal::detail::parse_integer(env, "SEPAL_THREADS", 0));
        }
    }
    if (cfg.threads < 1) {
        throw Error(ErrorKind::InvalidConfig, "thread count must be at least 1");
    }
    sepal::apply_preset(cfg, o.preset.empty() ? "visium-like" : o.preset);
    if (o.hops) cfg.hops = *o.hops;
    if (!o.op.empty()) {
        auto v = sepal::nn::parse_operator(o.op);
        if (!v) throw Error(ErrorKind::InvalidConfig, "unknown operator '" + o.op + "'");
        cfg.op = *v;
    }
    if (!o.aggregation.empty()) {
        auto v = sepal::parse_aggregation(o.aggregation);
        if (!v) throw Error(ErrorKind::InvalidConfig, "unknown aggregation '" + o.aggregation + "'");
        cfg.aggregation = *v;
    }
    if (!o.pooling.empty()) {
        auto v = sepal::nn::parse_pooling(o.pooling);
        if (!v) throw Error(ErrorKind::InvalidConfig, "unknown pooling '" + o.pooling + "'");
        cfg.pooling = *v;
    }
    if (!o.geometry.empty()) {
        auto v = sepal::parse_geometry(o.geometry);
        if (!v) throw Error(ErrorKind::InvalidConfig, "unknown geometry '" + o.geometry + "'");
        cfg.geometry = *v;
    }
    if (!o.center.empty()) {
        if (o.center != "true" && o.center != "false") throw Error(ErrorKind::InvalidConfig, "--center-slides takes true or false");
        cfg.center_slides = (o.center == "true");
    }
    if (o.sag_ratio) cfg.sag_ratio = *o.sag_ratio;
    if (o.pre_mlp) cfg.pre_mlp = widths(*o.pre_mlp);
    if (o.hidden) cfg.hidden = widths(*o.hidden);
    if (o.post_mlp) cfg.post_mlp = widths(*o.post_mlp);
    if (o.lr) cfg.stage2.learning_rate = *o.lr;
    if (o.lr1) cfg.stage1.learning_rate = *o.lr1;
    for (auto* t : {&cfg.stage1, &cfg.stage2}) {
        if (o.batch) t->batch_size = *o.batch;
        if (o.epochs) t->max_epochs = *o.epochs;
        if (o.patience) t->patience = *o.patience;
        if (o.max_steps) t->max_steps = *o.max_steps;
        if (o.seed) t->seed = *o.seed;
    }
}

}

int main(int argc, char** argv) {
    CLI::App app{"Spatial expression prediction from patch embeddings"};
    app.require_subcommand(1);

    sepal::PipelineConfig cfg;
    Overrides o;
    int stage = 0;

    sepal::SynthConfig synth;
    std::string synth_out, synth_geometry;
    auto* s = app.add_subcommand("synth", "Write a seeded synthetic dataset");
    s->add_option("--out", synth_out, "Output directory")->required();
    s->add_option("--rows", synth.grid_rows, "Grid rows");
    s->add_option("--cols", synth.grid_cols, "Grid columns");
    s->add_option("--d-emb", synth.d_emb, "Embedding width");
    s->add_option("--genes", synth.n_genes, "Total genes");
    s->add_option("--smooth", synth.n_smooth, "Spatially smooth genes");
    s->add_option("--noise-sd", synth.noise_sd, "Noise of smooth genes");
    s->add_option("--seed", synth.seed, "Random seed");
    s->add_option("--geometry", synth_geometry, "square_grid or hex_array");
    s->add_option("--train", synth.n_train, "Training slides");
    s->add_option("--val", synth.n_val, "Validation slides");
    s->add_option("--test", synth.n_test, "Test slides");
    s->add_option("--field-amp", synth.field_amplitude, "Amplitude of the sinusoidal field");
    s->add_option("--neighbor-amp", synth.neighbor_amplitude, "Amplitude of the neighbour-embedding term");
    s->add_option("--zero-fraction", synth.zero_fraction, "Planted zeros per gene, as a fraction of spots");

    std::vector<CLI::App*> commands;
    for (auto [name, help] : std::initializer_list<std::pair<const char*, const char*>>{
             {"preprocess", "Filter, normalize and log-transform"},
             {"denoise", "Impute dropout zeros"},
             {"select", "Rank genes by Moran's I and keep the top ones"},
             {"graphs", "Build per-spot subgraphs"},
             {"train", "Train stage 1 or 2"},
             {"eval", "Score test predictions"},
             {"figures", "Write the PCC histogram and heatmaps"},
             {"pipeline", "Run every step"}}) {
        auto* c = app.add_subcommand(name, help);
        add_common(c, cfg, o);
        commands.push_back(c);
    }
    app.get_subcommand("train")->add_option("--stage", stage, "1 or 2")->required()->check(CLI::IsMember({1, 2}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 1;
    }

    try {
        if (s->parsed()) {
            if (!synth_geometry.empty()) {
                auto g = sepal::parse_geometry(synth_geometry);
                if (!g) {
                    throw sepal::Error(sepal::ErrorKind::InvalidConfig, "unknown geometry '" + synth_geometry + "'");
                }
                synth.geometry = *g;
            }
            std::cout << sepal::cmd_synth(synth, synth_out) << "\n";
            return 0;
        }
        for (auto* c : commands) {
            if (!c->parsed()) {
                continue;
            }
            resolve(cfg, o, c->count("--threads") > 0);
            const std::string name = c->get_name();
            if (name == "preprocess") sepal::cmd_preprocess(cfg);
            else if (name == "denoise") sepal::cmd_denoise(cfg);
            else if (name == "select") sepal::cmd_select(cfg);
            else if (name == "graphs") sepal::cmd_graphs(cfg);
            else if (name == "train") sepal::cmd_train(cfg, stage);
            else if (name == "eval") sepal::cmd_eval(cfg);
            else if (name == "figures") sepal::cmd_figures(cfg);
            else sepal::cmd_pipeline(cfg);
        }
    } catch (const sepal::Error& e) {
        std::cerr << "error [" << sepal::to_string(e.kind()) << "]: " << e.what() << "\n";
        return e.kind() == sepal::ErrorKind::IoFailure ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
