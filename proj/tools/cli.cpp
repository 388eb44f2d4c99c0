#include "cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "msti/profiles.hpp"
#include "msti/scoring.hpp"
#include "msti/serialization.hpp"
#include "msti/synthetic.hpp"
#include "msti/training.hpp"

namespace msti::cli {

namespace fs = std::filesystem;

namespace {

struct NetworkOptions {
    NetworkConfig net = profiles::desk_network();
    std::string gate = "transformed";
    std::string variant = "E";

    void add(CLI::App* app) {
        app->add_option("--resolution", net.resolution, "Frame height and width fed to the network")
            ->capture_default_str();
        app->add_option("--clip-length", net.input_frames, "Input frames per clip")->capture_default_str();
        app->add_option("--channels", net.channels, "Encoder widths per level")
            ->delimiter(',')
            ->capture_default_str();
        app->add_option("--bottleneck", net.bottleneck_channels, "Bottleneck width (memory item size)")
            ->capture_default_str();
        app->add_option("--reduction", net.reduction, "Channel attention reduction ratio")->capture_default_str();
        app->add_option("--memory-items", net.memory_items, "Number of memory items")->capture_default_str();
        app->add_option("--gate-target", gate, "Channel attention gate target")
            ->check(CLI::IsMember({"transformed", "input"}))
            ->capture_default_str();
        app->add_option("--skip-connections", net.skip_connections, "Decoder skip connections")
            ->capture_default_str();
        app->add_option("--variant", variant, "Model variant")
            ->check(CLI::IsMember({"A", "B", "C", "D", "E"}))
            ->capture_default_str();
    }

    NetworkConfig resolved() const {
        NetworkConfig c = net;
        c.gate_target = gate == "input" ? astfm::GateTarget::input : astfm::GateTarget::transformed;
        c.validate();
        return c;
    }
};

struct TrainOptions {
    train::TrainConfig cfg = profiles::desk_training();
    float flow_scale = 20.0f;

    void add(CLI::App* app) {
        app->add_option("--epochs", cfg.epochs, "Training epochs")->capture_default_str();
        app->add_option("--batch-size", cfg.batch_size, "Clips per step")->capture_default_str();
        app->add_option("--lr", cfg.learning_rate, "Adam learning rate")->capture_default_str();
        app->add_option("--lambda-intensity", cfg.lambda_intensity, "Intensity loss weight")->capture_default_str();
        app->add_option("--lambda-separate", cfg.lambda_separate, "Separateness loss weight")->capture_default_str();
        app->add_option("--lambda-compact", cfg.lambda_compact, "Compactness loss weight")->capture_default_str();
        app->add_option("--delta", cfg.delta, "Compactness margin")->capture_default_str();
        app->add_option("--seed", cfg.seed, "Training seed")->capture_default_str();
        app->add_option("--checkpoint-every", cfg.checkpoint_every, "Steps between checkpoints (0: final only)")
            ->capture_default_str();
        app->add_option("--max-steps", cfg.max_steps, "Stop after this many steps (-1: no limit)")
            ->capture_default_str();
        app->add_option("--intensity-sum", cfg.intensity_sum, "Sum squared errors instead of averaging")
            ->capture_default_str();
        app->add_option("--compact-inverted", cfg.compact_inverted, "Penalize dissimilarity instead of similarity")
            ->capture_default_str();
        add_flow_scale(app);
    }

    void add_flow_scale(CLI::App* app) {
        app->add_option("--flow-scale", flow_scale, "Flow is divided by this before clamping to [-1,1]")
            ->capture_default_str();
    }
};

struct EvalOptionsCli {
    scoring::EvalOptions opts;
    bool error_maps = false;
    int max_videos = -1;

    void add(CLI::App* app) {
        app->add_option("--tau", opts.tau, "Weight of the PSNR term in the regularity score")->capture_default_str();
        app->add_option("--max-distance", opts.max_distance, "Max over queries for the memory distance")
            ->capture_default_str();
        app->add_option("--eval-batch", opts.batch_size, "Clips per evaluation forward pass")->capture_default_str();
        app->add_option("--error-maps", error_maps, "Write per-frame error maps")->capture_default_str();
        app->add_option("--max-videos", max_videos, "Evaluate at most this many videos (-1: all)")
            ->capture_default_str();
    }

    scoring::EvalOptions resolved(const fs::path& out) const {
        scoring::EvalOptions o = opts;
        if (error_maps) o.error_map_dir = out / "error_maps";
        if (max_videos >= 0) o.max_videos = max_videos;
        return o;
    }
};

struct SceneOptions {
    synthetic::SyntheticSceneConfig scene = profiles::desk_scene();
    bool anomalies = true;
    int clip_length = 4;

    void add(CLI::App* app) {
        app->add_option("--canvas", scene.canvas, "Frame size in pixels")->capture_default_str();
        app->add_option("--train-videos", scene.train_videos, "Normal training videos")->capture_default_str();
        app->add_option("--test-videos", scene.test_videos, "Test videos")->capture_default_str();
        app->add_option("--train-frames", scene.train_frames, "Frames per training video")->capture_default_str();
        app->add_option("--test-frames", scene.test_frames, "Frames per test video")->capture_default_str();
        app->add_option("--sprites", scene.sprites_per_video, "Normal sprites per video")->capture_default_str();
        app->add_option("--max-speed", scene.max_speed, "Largest normal velocity component")->capture_default_str();
        app->add_option("--anomaly-speed", scene.anomaly_speed, "Speed of motion anomalies")->capture_default_str();
        app->add_option("--scene-seed", scene.seed, "Scene seed")->capture_default_str();
        app->add_option("--anomalies", anomalies, "Script one anomaly window per test video")->capture_default_str();
        app->add_option("--clip-length", clip_length, "Clip length the anomaly windows are placed for")
            ->capture_default_str();
    }

    synthetic::SyntheticSceneConfig resolved() const {
        synthetic::SyntheticSceneConfig c = scene;
        c.anomalies = anomalies ? synthetic::default_anomaly_script(c, clip_length)
                                : std::vector<synthetic::AnomalyScript>{};
        c.validate();
        return c;
    }
};

// Fills options of `app` that were not given on the command line from an INI/TOML file.
// Keys may sit at top level or in a section named after the subcommand.
void apply_config_file(CLI::App* app, const std::string& path) {
    if (path.empty()) return;
    if (!fs::exists(path)) throw Error("config file not found: " + path);
    std::vector<CLI::ConfigItem> items;
    try {
        items = CLI::ConfigINI().from_file(path);
    } catch (const CLI::Error& e) {
        throw Error("cannot parse config file " + path + ": " + e.what());
    }
    std::vector<std::string> unknown;
    std::vector<std::pair<CLI::Option*, std::vector<std::string>>> pending;
    for (const auto& item : items) {
        if (item.name == "++" || item.name == "--") continue;
        const bool in_scope = item.parents.empty() || (item.parents.size() == 1 && item.parents[0] == app->get_name());
        CLI::Option* opt = in_scope && item.name != "config" ? app->get_option_no_throw("--" + item.name) : nullptr;
        if (!opt) {
            unknown.push_back(item.fullname());
            continue;
        }
        if (opt->count() == 0) pending.emplace_back(opt, item.inputs);
    }
    if (!unknown.empty()) {
        std::string msg = "unknown keys in config file " + path + ":";
        for (const auto& u : unknown) msg += " " + u;
        throw Error(msg);
    }
    for (auto& [opt, inputs] : pending) {
        try {
            opt->add_result(inputs);
            opt->run_callback();
        } catch (const CLI::Error& e) {
            throw Error("config file " + path + ": bad value for " + opt->get_name() + ": " + e.what());
        }
    }
}

void stamp_output(const fs::path& out, CLI::App* app) {
    fs::create_directories(out);
    std::ofstream(out / "FORMAT_VERSION") << kFormatVersion << '\n';
    std::istringstream all(app->config_to_str(true, false));
    std::ofstream cfg(out / "config.resolved.ini");
    cfg << "# resolved configuration of `" << app->get_name() << "`\n";
    std::string line;
    while (std::getline(all, line)) {
        if (line.rfind("config=", 0) == 0 || line.rfind("help=", 0) == 0) continue;
        cfg << line << '\n';
    }
}

data::ClipSet load_clips(const fs::path& root, data::Split split, const NetworkConfig& net, float flow_scale) {
    const auto ds = data::VideoDataset::open(root, split, net.input_frames);
    data::ClipOptions co;
    co.resolution = net.resolution;
    co.flow_scale = flow_scale;
    return data::ClipSet::build(ds, co);
}

nlohmann::json summary_json(const scoring::EvalResult& r) {
    const auto s = scoring::summarize(r.series);
    std::size_t frames = 0;
    for (const auto& v : r.series) frames += v.psnr.size();
    nlohmann::json j{{"videos", r.series.size()},
                     {"frames", frames},
                     {"normal_frames", s.normal_frames},
                     {"anomalous_frames", s.anomalous_frames},
                     {"normal_mean_regularity", s.normal_mean},
                     {"anomalous_mean_regularity", s.anomalous_mean}};
    j["auc"] = r.auc ? nlohmann::json(*r.auc) : nlohmann::json(nullptr);
    return j;
}

void write_eval_outputs(const fs::path& out, const scoring::EvalResult& r) {
    scoring::write_scores_csv(out / "scores.csv", r.series);
    std::ofstream(out / "summary.json") << summary_json(r).dump(2) << '\n';
}

std::string auc_text(const std::optional<double>& auc) {
    if (!auc) return "n/a";
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << *auc;
    return os.str();
}

struct AblationRow {
    char letter;
    ModelVariant variant;
    std::vector<std::optional<double>> aucs;
};

std::string ablation_table(const std::vector<AblationRow>& rows, const std::vector<std::uint64_t>& seeds) {
    std::ostringstream os;
    os << "| Model | Motion stream | Interaction | ASTFM | Memory |";
    for (auto s : seeds) os << " AUC seed " << s << " |";
    os << " Mean AUC |\n|---|---|---|---|---|";
    for (std::size_t i = 0; i < seeds.size(); ++i) os << "---|";
    os << "---|\n";
    auto mark = [](bool b) { return b ? "x" : "-"; };
    for (const auto& r : rows) {
        os << "| " << r.letter << " | " << mark(r.variant.use_motion_stream) << " | " << mark(r.variant.use_interaction)
           << " | " << mark(r.variant.use_astfm) << " | " << mark(r.variant.use_memory) << " |";
        double sum = 0;
        bool complete = true;
        for (const auto& a : r.aucs) {
            os << ' ' << auc_text(a) << " |";
            if (a) sum += *a;
            else complete = false;
        }
        os << ' ' << (complete ? auc_text(sum / static_cast<double>(r.aucs.size())) : "n/a") << " |\n";
    }
    return os.str();
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app("Dual-stream video anomaly detection with attention-based fusion and a normality memory");
    app.require_subcommand(1);
    app.set_version_flag("--version", kFormatVersion);

    std::string config_path;
    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "INI/TOML file with option values (command-line flags win)");
    };

    // gen-data
    SceneOptions scene;
    fs::path gen_out;
    auto* gen = app.add_subcommand("gen-data", "Write a synthetic scene dataset with scripted anomalies");
    gen->add_option("--out", gen_out, "Dataset root")->required();
    scene.add(gen);
    add_config(gen);

    // train
    NetworkOptions train_net;
    TrainOptions train_opts;
    fs::path train_data, train_out, resume;
    auto* tr = app.add_subcommand("train", "Train a model on the normal videos of a dataset");
    tr->add_option("--data", train_data, "Dataset root")->required();
    tr->add_option("--out", train_out, "Run directory")->required();
    tr->add_option("--resume", resume, "Continue from this checkpoint");
    train_net.add(tr);
    train_opts.add(tr);
    add_config(tr);

    // eval
    TrainOptions eval_flow;
    EvalOptionsCli eval_opts;
    fs::path eval_data, eval_out, eval_ckpt;
    std::string eval_split = "test";
    auto* ev = app.add_subcommand("eval", "Score test videos with a trained checkpoint");
    ev->add_option("--data", eval_data, "Dataset root")->required();
    ev->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
    ev->add_option("--out", eval_out, "Output directory")->required();
    ev->add_option("--split", eval_split, "Split to score")->check(CLI::IsMember({"train", "test"}))->capture_default_str();
    eval_flow.add_flow_scale(ev);
    eval_opts.add(ev);
    add_config(ev);

    // score
    fs::path score_in, score_out;
    double score_tau = scoring::kDefaultTau;
    auto* sc = app.add_subcommand("score", "Recompute regularity scores and AUC from an existing score CSV");
    sc->add_option("--scores", score_in, "Score CSV written by eval")->required()->check(CLI::ExistingFile);
    sc->add_option("--out", score_out, "Output directory")->required();
    sc->add_option("--tau", score_tau, "Weight of the PSNR term in the regularity score")->capture_default_str();
    add_config(sc);

    // ablate
    NetworkOptions abl_net;
    TrainOptions abl_train;
    EvalOptionsCli abl_eval;
    fs::path abl_data, abl_out;
    std::string abl_variants = "ABCDE";
    std::vector<std::uint64_t> abl_seeds;
    auto* ab = app.add_subcommand("ablate", "Train and evaluate variants A-E on the same data and seeds");
    ab->add_option("--data", abl_data, "Dataset root")->required();
    ab->add_option("--out", abl_out, "Output directory")->required();
    ab->add_option("--variants", abl_variants, "Variant letters to run")->capture_default_str();
    ab->add_option("--seeds", abl_seeds, "Training seeds (default: --seed)")->delimiter(',');
    abl_net.add(ab);
    ab->remove_option(ab->get_option("--variant"));
    abl_train.add(ab);
    abl_eval.add(ab);
    add_config(ab);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        CLI::App* sub = app.get_subcommands().front();
        apply_config_file(sub, config_path);

        if (sub == gen) {
            const auto cfg = scene.resolved();
            stamp_output(gen_out, gen);
            const auto ds = synthetic::generate_synthetic_scene(cfg, gen_out, scene.clip_length);
            std::cout << "wrote " << ds.train.videos.size() << " training and " << ds.test.videos.size()
                      << " test videos to " << gen_out.string() << '\n';
        } else if (sub == tr) {
            train_opts.cfg.validate();
            std::optional<train::TrainingState> state;
            if (!resume.empty()) {
                state.emplace(train::load_checkpoint(resume));
                state->set_config(train_opts.cfg);
                spdlog::info("resuming from {} at step {}", resume.string(), state->progress().step);
            } else {
                state.emplace(train_net.resolved(), ModelVariant::from_letter(train_net.variant[0]), train_opts.cfg);
            }
            const auto clips = load_clips(train_data, data::Split::train, state->model().config(), train_opts.flow_scale);
            stamp_output(train_out, tr);
            train::TrainRunOptions o;
            o.out_dir = train_out;
            const auto r = train::train(*state, clips, o);
            std::cout << "trained " << r.losses.size() << " steps; checkpoint " << r.checkpoint.string() << '\n';
        } else if (sub == ev) {
            auto state = train::load_checkpoint(eval_ckpt);
            const auto clips =
                load_clips(eval_data, data::parse_split(eval_split), state.model().config(), eval_flow.flow_scale);
            stamp_output(eval_out, ev);
            const auto r = scoring::evaluate(state, clips, eval_opts.resolved(eval_out));
            write_eval_outputs(eval_out, r);
            std::cout << "AUC " << auc_text(r.auc) << " over " << r.series.size() << " videos\n";
        } else if (sub == sc) {
            auto series = scoring::read_scores_csv(score_in);
            scoring::rescore(series, score_tau);
            stamp_output(score_out, sc);
            write_eval_outputs(score_out, scoring::EvalResult{series, scoring::overall_auc(series)});
            std::cout << "AUC " << auc_text(scoring::overall_auc(series)) << " over " << series.size() << " videos\n";
        } else if (sub == ab) {
            if (abl_seeds.empty()) abl_seeds.push_back(abl_train.cfg.seed);
            const NetworkConfig net = abl_net.resolved();
            stamp_output(abl_out, ab);
            const auto train_clips = load_clips(abl_data, data::Split::train, net, abl_train.flow_scale);
            const auto test_clips = load_clips(abl_data, data::Split::test, net, abl_train.flow_scale);
            std::vector<AblationRow> rows;
            for (char letter : abl_variants) {
                AblationRow row{letter, ModelVariant::from_letter(letter), {}};
                for (auto seed : abl_seeds) {
                    train::TrainConfig cfg = abl_train.cfg;
                    cfg.seed = seed;
                    const fs::path dir = abl_out / (std::string(1, letter) + "_seed" + std::to_string(seed));
                    train::TrainingState state(net, row.variant, cfg);
                    train::TrainRunOptions o;
                    o.out_dir = dir;
                    o.quiet = true;
                    const auto trained = train::train(state, train_clips, o);
                    auto snapshot = train::load_checkpoint(trained.checkpoint);
                    const auto r = scoring::evaluate(snapshot, test_clips, abl_eval.resolved(dir));
                    write_eval_outputs(dir, r);
                    spdlog::info("variant {} seed {}: AUC {}", letter, seed, auc_text(r.auc));
                    row.aucs.push_back(r.auc);
                }
                rows.push_back(std::move(row));
            }
            const std::string table = ablation_table(rows, abl_seeds);
            std::ofstream(abl_out / "ablation.md") << table;
            std::cout << table;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

int run(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.reserve(args.size());
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace msti::cli
