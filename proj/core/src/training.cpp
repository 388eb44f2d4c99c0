#include "msti/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <spdlog/spdlog.h>

#include "msti/serialization.hpp"

namespace msti::train {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    if (lambda_intensity < 0 || lambda_separate < 0 || lambda_compact < 0) {
        throw Error("train config: loss weights must be non-negative");
    }
    if (!(learning_rate > 0)) throw Error("train config: learning rate must be positive");
    if (delta < 0) throw Error("train config: delta must be non-negative");
    if (batch_size <= 0) throw Error("train config: batch size must be positive");
    if (epochs < 0) throw Error("train config: epochs must be non-negative");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw Error("train config: Adam betas must be in [0,1)");
}

double total_loss(const LossBreakdown& parts, const TrainConfig& cfg) {
    return cfg.lambda_intensity * parts.intensity + cfg.lambda_separate * parts.separateness +
           cfg.lambda_compact * parts.compactness;
}

template <typename T>
LossBreakdown LossTerms<T>::breakdown() const {
    return LossBreakdown{intensity.value()[0], separateness.value()[0], compactness.value()[0], total.value()[0]};
}

template <typename T>
LossTerms<T> compute_losses(const ForwardOutput<T>& out, const Var<T>& target, const TrainConfig& cfg) {
    LossTerms<T> t;
    t.intensity = intensity_loss(out.prediction, target, cfg.intensity_sum);
    if (out.weights.defined()) {
        t.separateness = memory::separateness_loss(out.weights);
        t.compactness = memory::compactness_loss(out.queries, out.read_queries, static_cast<T>(cfg.delta),
                                                 cfg.compact_inverted);
    } else {
        t.separateness = Var<T>::constant(Tensor<T>(Shape{}, T(0)));
        t.compactness = Var<T>::constant(Tensor<T>(Shape{}, T(0)));
    }
    t.total = total_loss(t.intensity, t.separateness, t.compactness, cfg);
    return t;
}

template <typename T>
Adam<T>::Adam(const ParameterSet<T>& params, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, v] : params.parameters()) {
        m_.emplace_back(v.shape());
        v_.emplace_back(v.shape());
    }
}

template <typename T>
void Adam<T>::step(ParameterSet<T>& params) {
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T step_size = static_cast<T>(lr_ / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(eps_);
    auto& entries = params.parameters();
    for (std::size_t p = 0; p < entries.size(); ++p) {
        Var<T> var = entries[p].second;
        const Tensor<T>& g = var.grad();
        Tensor<T>& w = var.mutable_value();
        Tensor<T>& m = m_[p];
        Tensor<T>& v = v_[p];
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            w[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
        }
    }
}

template class Adam<float>;
template class Adam<double>;
template struct LossTerms<float>;
template struct LossTerms<double>;
template LossTerms<float> compute_losses(const ForwardOutput<float>&, const Var<float>&, const TrainConfig&);
template LossTerms<double> compute_losses(const ForwardOutput<double>&, const Var<double>&, const TrainConfig&);

TrainingState::TrainingState(NetworkConfig net, ModelVariant variant, TrainConfig cfg)
    : cfg_(std::move(cfg)),
      model_(std::move(net), variant, cfg_.seed),
      bank_(model_.config().memory_items, model_.config().bottleneck_channels, cfg_.seed + 1) {
    cfg_.validate();
    adam_ = Adam<float>(model_.parameters(), cfg_.learning_rate, cfg_.beta1, cfg_.beta2, cfg_.adam_eps);
}

void TrainingState::set_config(const TrainConfig& cfg) {
    cfg.validate();
    const long long steps = adam_.steps();
    auto m = std::move(adam_.first_moments());
    auto v = std::move(adam_.second_moments());
    adam_ = Adam<float>(model_.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    adam_.set_steps(steps);
    adam_.first_moments() = std::move(m);
    adam_.second_moments() = std::move(v);
    cfg_ = cfg;
}

namespace {

std::string describe(const LossBreakdown& b) {
    std::ostringstream os;
    os << "intensity=" << b.intensity << " separateness=" << b.separateness << " compactness=" << b.compactness
       << " total=" << b.total;
    return os.str();
}

}  // namespace

LossBreakdown TrainingState::step(const data::Batch& batch) {
    auto& params = model_.parameters();
    params.zero_grad();
    const Var<float> frames = Var<float>::constant(batch.frames);
    const Var<float> flow = Var<float>::constant(batch.flow);
    const Var<float> target = Var<float>::constant(batch.target);
    const Var<float> items = bank_.as_constant();
    const auto out = model_.forward(frames, flow, items, true);
    const auto terms = compute_losses(out, target, cfg_);
    const LossBreakdown b = terms.breakdown();
    if (!std::isfinite(b.total) || !std::isfinite(b.intensity) || !std::isfinite(b.separateness) ||
        !std::isfinite(b.compactness)) {
        throw Error("non-finite loss at step " + std::to_string(progress_.step) + ": " + describe(b));
    }
    backward(terms.total);
    adam_.step(params);
    if (model_.variant().use_memory) bank_.update(out.queries.value());
    ++progress_.step;
    return b;
}

LossBreakdown TrainingState::evaluate_losses(const data::Batch& batch) {
    std::vector<std::pair<Tensor<float>, Tensor<float>>> saved;
    for (const auto& [name, s] : model_.parameters().batch_norm_stats()) saved.emplace_back(s->running_mean, s->running_var);
    const auto out = model_.forward(Var<float>::constant(batch.frames), Var<float>::constant(batch.flow),
                                    bank_.as_constant(), true);
    const auto b = compute_losses(out, Var<float>::constant(batch.target), cfg_).breakdown();
    std::size_t i = 0;
    for (const auto& [name, s] : model_.parameters().batch_norm_stats()) {
        s->running_mean = saved[i].first;
        s->running_var = saved[i].second;
        ++i;
    }
    return b;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t clips, int batch_size, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(clips);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed * 1000003ull + static_cast<std::uint64_t>(epoch));
    // Fisher-Yates with an explicit modulus keeps the order independent of the standard library.
    for (std::size_t i = clips; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < clips; i += batch_size) {
        batches.emplace_back(order.begin() + i, order.begin() + std::min(clips, i + batch_size));
    }
    return batches;
}

TrainRunResult train(TrainingState& state, const data::ClipSet& clips, const TrainRunOptions& options) {
    if (clips.size() == 0) throw Error("training set is empty: no clips to train on");
    const TrainConfig& cfg = state.config();
    fs::create_directories(options.out_dir);
    std::ofstream log(options.out_dir / options.log_name, std::ios::app);
    if (!log) throw Error("cannot open training log in " + options.out_dir.string());

    TrainRunResult result;
    Progress& p = state.progress();
    auto write_checkpoint = [&](const std::string& name) {
        const fs::path path = options.out_dir / name;
        save_checkpoint(path, state);
        return path;
    };
    bool stop = false;
    while (p.epoch < cfg.epochs && !stop) {
        const auto batches = epoch_batches(clips.size(), cfg.batch_size, cfg.seed, p.epoch);
        while (p.batch_in_epoch < static_cast<int>(batches.size())) {
            if (cfg.max_steps >= 0 && p.step >= cfg.max_steps) {
                stop = true;
                break;
            }
            const auto batch = clips.batch(batches[p.batch_in_epoch]);
            const LossBreakdown b = state.step(batch);
            ++p.batch_in_epoch;
            result.losses.push_back(b);
            nlohmann::json rec{{"step", p.step},
                               {"epoch", p.epoch},
                               {"intensity", b.intensity},
                               {"separateness", b.separateness},
                               {"compactness", b.compactness},
                               {"total", b.total},
                               {"lr", cfg.learning_rate}};
            log << rec.dump() << '\n';
            if (options.on_step) options.on_step(p, b);
            if (cfg.checkpoint_every > 0 && p.step % cfg.checkpoint_every == 0) {
                write_checkpoint("checkpoint_step_" + std::to_string(p.step) + ".msti");
            }
        }
        if (stop) break;
        if (!options.quiet && !result.losses.empty()) {
            spdlog::info("epoch {} done, step {}, last total loss {:.6f}", p.epoch + 1, p.step, result.losses.back().total);
        }
        ++p.epoch;
        p.batch_in_epoch = 0;
    }
    log.flush();
    result.checkpoint = write_checkpoint(options.checkpoint_name);
    return result;
}

// Layout: 8-byte magic "MSTICKPT", uint64 header length, JSON header, raw float32 payload.
namespace {

constexpr char kMagic[8] = {'M', 'S', 'T', 'I', 'C', 'K', 'P', 'T'};

struct TensorRecord {
    std::string name;
    const Tensor<float>* tensor;
};

}  // namespace

void save_checkpoint(const fs::path& path, const TrainingState& state) {
    auto& st = const_cast<TrainingState&>(state);
    std::vector<TensorRecord> records;
    const auto& params = st.model().parameters().parameters();
    for (const auto& [name, v] : params) records.push_back({"param/" + name, &v.value()});
    for (const auto& [name, s] : st.model().parameters().batch_norm_stats()) {
        records.push_back({"bn/" + name + "/mean", &s->running_mean});
        records.push_back({"bn/" + name + "/var", &s->running_var});
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        records.push_back({"adam/m/" + params[i].first, &st.optimizer().first_moments()[i]});
        records.push_back({"adam/v/" + params[i].first, &st.optimizer().second_moments()[i]});
    }
    records.push_back({"memory/items", &st.bank().items()});

    nlohmann::json header;
    header["format"] = kCheckpointFormat;
    header["version"] = kCheckpointVersion;
    header["network"] = to_json(st.model().config());
    header["variant"] = to_json(st.model().variant());
    header["train"] = to_json(st.config());
    header["progress"] = {{"epoch", st.progress().epoch},
                          {"batch_in_epoch", st.progress().batch_in_epoch},
                          {"step", st.progress().step},
                          {"adam_steps", st.optimizer().steps()}};
    std::uint64_t offset = 0;
    auto& index = header["tensors"] = nlohmann::json::array();
    for (const auto& r : records) {
        const Shape s = r.tensor->shape();
        index.push_back({{"name", r.name}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", offset}});
        offset += r.tensor->size();
    }
    const std::string text = header.dump();
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw Error("cannot write checkpoint " + path.string());
        const std::uint64_t len = text.size();
        out.write(kMagic, sizeof(kMagic));
        out.write(reinterpret_cast<const char*>(&len), sizeof(len));
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& r : records) {
            out.write(reinterpret_cast<const char*>(r.tensor->data()),
                      static_cast<std::streamsize>(r.tensor->size() * sizeof(float)));
        }
        if (!out) throw Error("failed writing checkpoint " + path.string());
    }
    fs::rename(tmp, path);
}

TrainingState load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint " + path.string());
    char magic[8];
    std::uint64_t len = 0;
    in.read(magic, sizeof(magic));
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || !std::equal(magic, magic + 8, kMagic)) throw Error("not a checkpoint file: " + path.string());
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    const auto header = nlohmann::json::parse(text);
    if (header.value("format", "") != kCheckpointFormat || header.value("version", 0) != kCheckpointVersion) {
        throw Error("unsupported checkpoint format in " + path.string());
    }
    std::vector<float> payload;
    {
        std::uint64_t total = 0;
        for (const auto& t : header["tensors"]) {
            const auto s = t["shape"];
            total = std::max<std::uint64_t>(total, t["offset"].get<std::uint64_t>() +
                                                       static_cast<std::uint64_t>(s[0].get<int>()) * s[1].get<int>() *
                                                           s[2].get<int>() * s[3].get<int>());
        }
        payload.resize(total);
        in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(total * sizeof(float)));
        if (!in) throw Error("truncated checkpoint " + path.string());
    }
    std::map<std::string, Tensor<float>> tensors;
    for (const auto& t : header["tensors"]) {
        const auto s = t["shape"];
        const Shape shape{s[0].get<int>(), s[1].get<int>(), s[2].get<int>(), s[3].get<int>()};
        const auto off = t["offset"].get<std::uint64_t>();
        tensors.emplace(t["name"].get<std::string>(),
                        Tensor<float>(shape, std::vector<float>(payload.begin() + off, payload.begin() + off + shape.numel())));
    }
    auto take = [&](const std::string& name, const Shape& expect) -> Tensor<float>& {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw Error("checkpoint " + path.string() + " lacks tensor " + name);
        if (!(it->second.shape() == expect)) {
            throw Error("checkpoint tensor " + name + " has shape " + it->second.shape().str() + ", expected " + expect.str());
        }
        return it->second;
    };

    TrainingState state(network_config_from_json(header["network"]), variant_from_json(header["variant"]),
                        train_config_from_json(header["train"]));
    auto& params = state.model().parameters().parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        Var<float> v = params[i].second;
        v.mutable_value() = take("param/" + params[i].first, v.shape());
        state.optimizer().first_moments()[i] = take("adam/m/" + params[i].first, v.shape());
        state.optimizer().second_moments()[i] = take("adam/v/" + params[i].first, v.shape());
    }
    for (const auto& [name, s] : state.model().parameters().batch_norm_stats()) {
        s->running_mean = take("bn/" + name + "/mean", s->running_mean.shape());
        s->running_var = take("bn/" + name + "/var", s->running_var.shape());
    }
    state.bank() = memory::MemoryBank<float>(take("memory/items", state.bank().items().shape()));
    const auto& prog = header["progress"];
    state.progress().epoch = prog["epoch"].get<int>();
    state.progress().batch_in_epoch = prog["batch_in_epoch"].get<int>();
    state.progress().step = prog["step"].get<long long>();
    state.optimizer().set_steps(prog["adam_steps"].get<long long>());
    return state;
}

}  // namespace msti::train
