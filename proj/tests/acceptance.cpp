// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>

#include "msti/profiles.hpp"
#include "msti/scoring.hpp"
#include "msti/synthetic.hpp"
#include "msti/training.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace msti;
namespace fs = std::filesystem;
using msti::testing::random_tensor;

namespace {

// Pinned tolerances and budgets.
constexpr int kOracleInstances = 100;
constexpr double kOracleTol = 1e-5;
constexpr double kOracleBudgetSec = 60;
constexpr int kGradSamplesPerModule = 20;
constexpr double kGradRtol = 1e-3;
constexpr double kGradAtol = 1e-6;
constexpr double kGradBudgetSec = 300;
constexpr int kMemoryUpdates = 1000;
constexpr double kUnitNormTol = 1e-6;
constexpr double kStochasticTol = 1e-6;
constexpr double kAucOracleTol = 1e-9;
constexpr int kEndToEndEpochs = 30;
constexpr double kEndToEndBudgetSec = 15 * 60;
constexpr double kMinAuc = 0.85;
constexpr int kAblationEpochs = kEndToEndEpochs;
constexpr int kAblationSeeds = 3;
constexpr double kMinAttentionGain = 0.20;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Equation oracles -----------------------------------------------------------------

Outcome oracle_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> dim(1, 5);
    std::map<std::string, double> worst;
    auto record = [&](const std::string& name, double err) { worst[name] = std::max(worst[name], err); };

    for (int i = 0; i < kOracleInstances; ++i) {
        const int c = 2 * dim(rng), r = 2, h = dim(rng), w = dim(rng), n = dim(rng) % 2 + 1;
        ParameterSet<double> params(i);
        const auto ca = astfm::make_channel_attention(params, "ca", c, r);
        auto fu = astfm::make_fusion(params, "fu", c);
        fu.b1.mutable_value() = random_tensor<double>(fu.b1.shape(), rng, -0.5, 0.5);
        fu.b2.mutable_value() = random_tensor<double>(fu.b2.shape(), rng, -0.5, 0.5);
        const auto x = random_tensor<double>(Shape{n, c, h, w}, rng);
        const auto a = random_tensor<double>(Shape{n, c, h, w}, rng);

        const auto got_ca = astfm::channel_attention(Var<double>::constant(x), ca).value();
        const auto want_ca = oracle::channel_attention(x, ca.j1.value(), ca.j2.value());
        double e = 0;
        for (std::size_t k = 0; k < x.size(); ++k) e = std::max(e, std::abs(got_ca[k] - want_ca[k]));
        record("channel_attention", e);

        const auto got_fu = astfm::fuse(Var<double>::constant(a), Var<double>::constant(x), fu);
        const auto want_fu = oracle::fuse(a, x, fu.w1.value(), fu.b1.value(), fu.w2.value(), fu.b2.value());
        e = 0;
        for (std::size_t k = 0; k < a.size(); ++k) e = std::max(e, std::abs(got_fu.fused.value()[k] - want_fu.fused[k]));
        record("fuse", e);

        const int items_n = dim(rng) + 1;
        memory::MemoryBank<double> bank(items_n, c, 100 + i);
        const auto rd = memory::read(Var<double>::constant(x), bank.as_constant());
        const auto q = oracle::rows_of(rd.queries.value());
        const auto want_rd = oracle::memory_read(q, oracle::rows_of(bank.items()));
        e = 0;
        for (std::size_t k = 0; k < q.size(); ++k)
            for (int j = 0; j < items_n; ++j) e = std::max(e, std::abs(rd.weights.value().at(0, 0, k, j) - want_rd.w[k][j]));
        for (std::size_t k = 0; k < q.size(); ++k)
            for (int j = 0; j < c; ++j)
                e = std::max(e, std::abs(rd.read_queries.value().at(0, 0, k, j) - want_rd.read[k][j]));
        record("memory_read", e);

        const auto want_up = oracle::memory_update(oracle::rows_of(bank.items()), q);
        bank.update(rd.queries.value());
        e = 0;
        for (int k = 0; k < items_n; ++k)
            for (int j = 0; j < c; ++j) e = std::max(e, std::abs(bank.items().at(0, 0, k, j) - want_up[k][j]));
        record("memory_update", e);

        record("intensity_loss",
               std::abs(train::intensity_loss(Var<double>::constant(a), Var<double>::constant(x)).value()[0] -
                        oracle::mean_squared_error(a, x)));
        record("separateness_loss", std::abs(memory::separateness_loss(rd.weights).value()[0] -
                                             oracle::separateness(oracle::rows_of(rd.weights.value()))));
        // Compactness on unrelated query pairs so the hinge is exercised on both sides.
        const auto q2 = random_tensor<double>(rd.queries.shape(), rng);
        record("compactness_loss",
               std::abs(memory::compactness_loss(Var<double>::constant(q2), rd.queries, 0.1).value()[0] -
                        oracle::compactness(q, oracle::rows_of(q2), 0.1)));

        const auto p1 = random_tensor<double>(Shape{1, 3, h + 2, w + 2}, rng);
        const auto p2 = random_tensor<double>(Shape{1, 3, h + 2, w + 2}, rng);
        record("psnr", std::abs(scoring::psnr(p1, p2) - oracle::psnr(p1, p2)));

        record("memory_distance", std::abs(memory::memory_distance(q2, bank.items()) -
                                           oracle::memory_distance(oracle::rows_of(q2), oracle::rows_of(bank.items()))));

        std::uniform_real_distribution<double> u(0, 40);
        std::vector<double> ps(12), ds(12);
        for (auto& v : ps) v = u(rng);
        for (auto& v : ds) v = u(rng) / 20;
        const auto got_r = scoring::regularity_score(ps, ds, 0.7);
        const auto want_r = oracle::regularity(ps, ds, 0.7);
        e = 0;
        for (std::size_t k = 0; k < got_r.size(); ++k) e = std::max(e, std::abs(got_r[k] - want_r[k]));
        record("regularity", e);
    }
    const double sec = seconds_since(t0);
    bool pass = sec < kOracleBudgetSec;
    std::string detail;
    for (const auto& [name, err] : worst) {
        pass = pass && err <= kOracleTol;
        detail += name + " " + fmt("%.1e", err) + ", ";
    }
    detail += std::to_string(kOracleInstances) + " instances each, " + fmt("%.1f s", sec);
    return {pass, detail};
}

// Finite-difference gradients ---------------------------------------------------------

Outcome gradient_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    NetworkConfig net;
    net.resolution = 16;
    net.channels = {8, 16, 32};
    net.bottleneck_channels = 64;
    net.reduction = 4;
    MstiNet<double> model(net, ModelVariant{}, 31);
    memory::MemoryBank<double> bank(net.memory_items, net.bottleneck_channels, 32);
    auto items = Var<double>::leaf(bank.items(), true);
    std::mt19937_64 rng(33);
    const auto frames = Var<double>::constant(random_tensor<double>(Shape{2, 12, 16, 16}, rng));
    const auto flow = Var<double>::constant(random_tensor<double>(Shape{2, 8, 16, 16}, rng));
    const auto target = Var<double>::constant(random_tensor<double>(Shape{2, 3, 16, 16}, rng));
    const train::TrainConfig cfg;
    auto loss = [&] { return train::compute_losses(model.forward(frames, flow, items, true), target, cfg).total; };

    model.parameters().zero_grad();
    items.zero_grad();
    backward(loss());

    // Group parameters by module: the first two name components.
    std::map<std::string, std::vector<Var<double>>> modules;
    for (const auto& [name, v] : model.parameters().parameters()) {
        const auto first = name.find('.');
        const auto second = name.find('.', first + 1);
        modules[name.substr(0, second)].push_back(v);
    }
    modules["memory.items"].push_back(items);

    int checked = 0, failed = 0;
    double worst = 0;
    std::string worst_where;
    for (auto& [module, vars] : modules) {
        std::vector<std::pair<std::size_t, std::size_t>> entries;
        for (std::size_t p = 0; p < vars.size(); ++p)
            for (std::size_t i = 0; i < vars[p].value().size(); ++i) entries.emplace_back(p, i);
        std::shuffle(entries.begin(), entries.end(), rng);
        entries.resize(std::min<std::size_t>(entries.size(), kGradSamplesPerModule));
        for (const auto& [p, i] : entries) {
            Var<double> v = vars[p];
            const double analytic = v.grad()[i];
            const double numeric =
                msti::testing::central_difference([&] { return loss().value()[0]; }, v.mutable_value()[i], 1e-6);
            ++checked;
            const double rel = std::abs(analytic - numeric) / (kGradAtol + kGradRtol * std::max(std::abs(analytic), std::abs(numeric)));
            if (rel > worst) {
                worst = rel;
                worst_where = module;
            }
            if (!msti::testing::grad_close(analytic, numeric, kGradRtol, kGradAtol)) ++failed;
        }
    }
    const double sec = seconds_since(t0);
    return {failed == 0 && sec < kGradBudgetSec,
            std::to_string(modules.size()) + " modules, " + std::to_string(checked) + " entries, " +
                std::to_string(failed) + " outside tolerance, worst error/tolerance " + fmt("%.3f", worst) + " in " +
                worst_where + ", " + fmt("%.1f s", sec)};
}

// Invariants -------------------------------------------------------------------------

Outcome invariant_suite() {
    std::mt19937_64 rng(44);
    std::vector<std::string> broken;

    memory::MemoryBank<float> bank(10, 64, 45);
    double norm_err = 0;
    for (int s = 0; s < kMemoryUpdates; ++s) {
        const double scale = std::pow(10.0, static_cast<int>(rng() % 7) - 3);
        bank.update(random_tensor<float>(Shape{1, 1, static_cast<int>(rng() % 64) + 1, 64}, rng, -scale, scale));
    }
    for (int i = 0; i < 10; ++i) {
        double n = 0;
        for (int c = 0; c < 64; ++c) n += static_cast<double>(bank.items().at(0, 0, i, c)) * bank.items().at(0, 0, i, c);
        norm_err = std::max(norm_err, std::abs(std::sqrt(n) - 1.0));
    }
    if (norm_err >= kUnitNormTol) broken.push_back("unit norm");

    auto rows_are_distributions = [](const Tensor<float>& t) {
        for (int k = 0; k < t.shape().h; ++k) {
            double s = 0;
            for (int j = 0; j < t.shape().w; ++j) {
                if (t.at(0, 0, k, j) < 0) return false;
                s += t.at(0, 0, k, j);
            }
            if (std::abs(s - 1.0) > kStochasticTol) return false;
        }
        return true;
    };
    NetworkConfig net = profiles::desk_network();
    bool rows_ok = true, attention_ok = true;
    for (int trial = 0; trial < 5; ++trial) {
        MstiNet<float> model(net, ModelVariant{}, 50 + trial);
        const auto out = model.forward(
            Var<float>::constant(random_tensor<float>(Shape{2, 12, 64, 64}, rng)),
            Var<float>::constant(random_tensor<float>(Shape{2, 8, 64, 64}, rng)), bank.as_constant(), trial % 2 == 0);
        rows_ok = rows_ok && rows_are_distributions(out.weights.value());
        rows_ok = rows_ok && rows_are_distributions(bank.update_weights(out.queries.value()));
        for (const auto& att : out.encoder.attention)
            for (float a : att.value().storage()) attention_ok = attention_ok && a > 0.0f && a < 1.0f;
    }
    if (!rows_ok) broken.push_back("address rows");
    if (!attention_ok) broken.push_back("attention range");

    bool r_ok = true;
    std::uniform_real_distribution<double> u(-1e3, 1e3);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> p(30), d(30);
        for (auto& v : p) v = u(rng);
        for (auto& v : d) v = std::abs(u(rng));
        for (double r : scoring::regularity_score(p, d, std::uniform_real_distribution<double>(0, 1)(rng)))
            r_ok = r_ok && r >= 0.0 && r <= 1.0;
    }
    if (!r_ok) broken.push_back("regularity range");

    double auc_err = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 20 + static_cast<int>(rng() % 80);
        std::vector<double> s(n);
        std::vector<int> l(n);
        for (int i = 0; i < n; ++i) {
            s[i] = static_cast<double>(rng() % (trial % 2 ? 5 : 100000));
            l[i] = static_cast<int>(rng() % 4 == 0);
        }
        l[0] = 1;
        l[1] = 0;
        auc_err = std::max(auc_err, std::abs(scoring::roc_auc(s, l) - oracle::pairwise_auc(s, l)));
    }
    if (auc_err > kAucOracleTol) broken.push_back("auc oracle");

    std::string detail = "max |norm-1| " + fmt("%.1e", norm_err) + ", auc vs pairwise " + fmt("%.1e", auc_err);
    for (const auto& b : broken) detail += ", broken: " + b;
    return {broken.empty(), detail};
}

// Synthetic experiments --------------------------------------------------------------

struct Scene {
    data::ClipSet train, test;
};

Scene desk_scene(const fs::path& root) {
    const auto cfg = profiles::desk_scene();
    const auto ds = synthetic::generate_synthetic_scene(cfg, root, profiles::desk_network().input_frames);
    const data::ClipOptions opts{profiles::desk_network().resolution, 20.0f};
    return {data::ClipSet::build(ds.train, opts), data::ClipSet::build(ds.test, opts)};
}

struct TrainedRun {
    fs::path checkpoint;
    scoring::EvalResult eval;
    double seconds = 0;
};

// Trains on the training split, then evaluates a snapshot reloaded from the checkpoint.
TrainedRun train_and_evaluate(const Scene& scene, ModelVariant variant, int epochs, std::uint64_t seed,
                              const fs::path& dir) {
    const auto t0 = std::chrono::steady_clock::now();
    auto cfg = profiles::desk_training();
    cfg.epochs = epochs;
    cfg.seed = seed;
    train::TrainingState state(profiles::desk_network(), variant, cfg);
    train::TrainRunOptions o;
    o.out_dir = dir;
    o.quiet = true;
    const auto trained = train::train(state, scene.train, o);
    auto snapshot = train::load_checkpoint(trained.checkpoint);
    TrainedRun r{trained.checkpoint, scoring::evaluate(snapshot, scene.test), 0};
    r.seconds = seconds_since(t0);
    return r;
}

Outcome end_to_end(const Scene& scene, const TrainedRun& run) {
    const auto sum = scoring::summarize(run.eval.series);
    const double auc = run.eval.auc.value_or(0.0);
    const bool pass = auc >= kMinAuc && sum.anomalous_mean < sum.normal_mean && run.seconds < kEndToEndBudgetSec;
    return {pass, "variant E, " + std::to_string(kEndToEndEpochs) + " epochs, " + std::to_string(scene.train.size()) +
                      " training clips: AUC " + fmt("%.4f", auc) + ", mean R normal " + fmt("%.3f", sum.normal_mean) +
                      " anomalous " + fmt("%.3f", sum.anomalous_mean) + ", " + fmt("%.0f s", run.seconds)};
}

// The end-to-end run is variant E with seed 0 under the same protocol, so it is reused.
Outcome ablation(const Scene& scene, const TrainedRun& e_seed0, const fs::path& dir) {
    std::map<char, std::vector<double>> aucs;
    for (int seed = 0; seed < kAblationSeeds; ++seed) {
        for (char letter : {'B', 'C', 'D', 'E'}) {
            const auto r = letter == 'E' && seed == 0
                               ? e_seed0
                               : train_and_evaluate(scene, ModelVariant::from_letter(letter), kAblationEpochs, seed,
                                                    dir / (std::string(1, letter) + "_seed" + std::to_string(seed)));
            aucs[letter].push_back(r.eval.auc.value_or(0.0));
            std::printf("  ablation %c seed %d: AUC %.4f (%.0f s)\n", letter, seed, aucs[letter].back(), r.seconds);
            std::fflush(stdout);
        }
    }
    std::map<char, double> mean;
    std::string detail = std::to_string(kAblationSeeds) + " seeds, " + std::to_string(kAblationEpochs) + " epochs:";
    for (auto& [letter, v] : aucs) {
        double s = 0;
        for (double a : v) s += a;
        mean[letter] = s / static_cast<double>(v.size());
        detail += std::string(" ") + letter + " " + fmt("%.4f", mean[letter]);
    }
    const bool pass = mean['E'] > mean['B'] && mean['E'] > mean['C'] && mean['E'] > mean['D'];
    return {pass, detail};
}

Outcome attention_locality(const Scene& scene, const TrainedRun& run) {
    auto snapshot = train::load_checkpoint(run.checkpoint);
    const auto loc = scoring::attention_locality(snapshot, scene.test);
    return {loc.relative_gain >= kMinAttentionGain,
            "level-1 weight on moving pixels " + fmt("%.4f", loc.moving_mean) + " vs background " +
                fmt("%.4f", loc.background_mean) + ": relative gain " + fmt("%+.1f%%", 100 * loc.relative_gain) +
                " (need >= " + fmt("%.0f%%", 100 * kMinAttentionGain) + ")"};
}

// Real-dataset layout ----------------------------------------------------------------

// Lays out grayscale .tif frames, .flo sidecars and labels as a Ped2 export would.
void write_ped2_like(const fs::path& root) {
    std::mt19937_64 rng(77);
    std::uniform_int_distribution<int> px(0, 255);
    auto video = [&](const fs::path& dir, int frames, bool labels) {
        fs::create_directories(dir / "flow");
        for (int f = 0; f < frames; ++f) {
            char stem[8];
            std::snprintf(stem, sizeof stem, "%03d", f + 1);
            cv::Mat gray(240, 360, CV_8UC1);
            for (int y = 0; y < gray.rows; ++y)
                for (int x = 0; x < gray.cols; ++x) gray.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>((x + y + 3 * f) % 256);
            gray(cv::Rect(20 + 4 * f, 100, 24, 40)).setTo(px(rng));
            cv::imwrite((dir / (std::string(stem) + ".tif")).string(), gray);
            data::FlowImage flo{360, 240, std::vector<float>(360 * 240 * 2, 0.0f)};
            for (int y = 100; y < 140; ++y)
                for (int x = 20 + 4 * f; x < 44 + 4 * f; ++x) flo.uv[2 * (y * 360 + x)] = 4.0f;
            data::write_flo(dir / "flow" / (std::string(stem) + ".flo"), flo);
        }
        if (labels) {
            std::ofstream out(dir / "labels.txt");
            for (int f = 0; f < frames; ++f) out << (f % 2) << '\n';
        }
    };
    video(root / "train" / "Train001", 8, false);
    video(root / "train" / "Train002", 8, false);
    video(root / "test" / "Test001", 8, true);
}

Outcome ped2_plumbing(const fs::path& root) {
    const auto t0 = std::chrono::steady_clock::now();
    write_ped2_like(root);
    const NetworkConfig net;  // full-size configuration at 256x256
    const data::ClipOptions opts{net.resolution, 20.0f};
    const auto train_clips = data::ClipSet::build(data::VideoDataset::open(root, data::Split::train), opts);
    const auto test_clips = data::ClipSet::build(data::VideoDataset::open(root, data::Split::test), opts);
    train::TrainConfig cfg;
    cfg.batch_size = 2;
    cfg.max_steps = 1;
    train::TrainingState state(net, ModelVariant{}, cfg);
    train::TrainRunOptions o;
    o.out_dir = root / "run";
    o.quiet = true;
    const auto trained = train::train(state, train_clips, o);
    auto snapshot = train::load_checkpoint(trained.checkpoint);
    scoring::EvalOptions eo;
    eo.max_videos = 1;
    eo.batch_size = 2;
    const auto r = scoring::evaluate(snapshot, test_clips, eo);
    const bool ok = trained.losses.size() == 1 && r.series.size() == 1 && r.series[0].psnr.size() == 4;
    return {ok, std::to_string(train_clips.size()) + " training clips, 1 step at " + std::to_string(net.resolution) +
                    "x" + std::to_string(net.resolution) + ", evaluated " + std::to_string(r.series.size()) +
                    " video with " + std::to_string(r.series.empty() ? 0 : r.series[0].psnr.size()) + " frames, " +
                    fmt("%.0f s", seconds_since(t0))};
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "msti_acceptance";
    fs::remove_all(work);
    fs::create_directories(work);

    int failures = 0;
    auto report = [&](const char* name, const std::function<Outcome()>& fn) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        if (!o.pass) ++failures;
        std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
        std::fflush(stdout);
    };

    report("equation oracles", oracle_suite);
    report("gradients", gradient_suite);
    report("invariants", invariant_suite);

    std::optional<Scene> scene;
    std::optional<TrainedRun> full;
    try {
        scene = desk_scene(work / "scene");
        full = train_and_evaluate(*scene, ModelVariant{}, kEndToEndEpochs, 0, work / "E_full");
    } catch (const std::exception& e) {
        std::printf("synthetic setup failed: %s\n", e.what());
    }
    auto need_run = [&](auto fn) {
        return [&, fn]() -> Outcome {
            if (!full) return {false, "no trained model"};
            return fn();
        };
    };
    report("synthetic end-to-end", need_run([&] { return end_to_end(*scene, *full); }));
    report("ablation ordering", need_run([&] { return ablation(*scene, *full, work / "ablation"); }));
    report("attention locality", need_run([&] { return attention_locality(*scene, *full); }));
    report("real-dataset plumbing", [&] { return ped2_plumbing(work / "ped2"); });

    std::printf("%d of 7 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
